"""Small fully-convolutional grasp network written directly in numpy.

Input planes are (height above table, stiffness) or height alone for the
depth-only baseline; outputs are the four grasp maps (Q, cos2, sin2, W).
Convolutions are cross-correlations computed with strided im2col; transpose
convolutions reuse the same gather/scatter helpers in reverse.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class WeightsError(ValueError):
    """Corrupt or incompatible weight file."""


class TrainingDivergence(RuntimeError):
    def __init__(self, msg: str, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# primitives


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def im2col(x, k, s, p):
    """(N, C, H, W) -> (N, C*k*k, oh*ow) patches, plus output size."""
    N, C, H, W = x.shape
    oh, ow = _out_size(H, k, s, p), _out_size(W, k, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {k} stride {s} padding {p} does not fit input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((N, C, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(N, C * k * k, oh * ow), (oh, ow)


def col2im(cols, shape, k, s, p, out_hw):
    """Adjoint of im2col: scatter-add patches back onto a (N, C, H, W) canvas."""
    N, C, H, W = shape
    oh, ow = out_hw
    cols = cols.reshape(N, C, k, k, oh, ow)
    xp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, :, i, j]
    return xp[:, :, p:p + H, p:p + W] if p else xp


def conv_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation. x (N,C,H,W), w (F,C,k,k), b (F,) -> (N,F,oh,ow)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv: input {x.shape} incompatible with weights {w.shape}")
    F, C, k, _ = w.shape
    cols, (oh, ow) = im2col(x, k, stride, padding)
    out = np.matmul(w.reshape(F, -1), cols) + b[None, :, None]
    return out.reshape(x.shape[0], F, oh, ow), (x.shape, cols)


def conv_backward(dout, cache, w, stride=1, padding=0):
    """Returns (dx, dw, db)."""
    xshape, cols = cache
    N, F, oh, ow = dout.shape
    k = w.shape[2]
    d = dout.reshape(N, F, oh * ow)
    dw = np.einsum("nfl,ncl->fc", d, cols, optimize=True).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(F, -1).T, d)
    dx = col2im(dcols, xshape, k, stride, padding, (oh, ow))
    return dx, dw, db


def tconv_out_size(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


def tconv_forward(x, w, b, stride=1, padding=0, output_padding=0):
    """Transpose convolution. x (N,C,h,w), w (C,F,k,k), b (F,) -> (N,F,H,W)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"tconv: input {x.shape} incompatible with weights {w.shape}")
    if output_padding >= stride and output_padding > 0:
        raise ShapeError("output_padding must be smaller than stride")
    N, C, h, wd = x.shape
    F, k = w.shape[1], w.shape[2]
    H = tconv_out_size(h, k, stride, padding, output_padding)
    W = tconv_out_size(wd, k, stride, padding, output_padding)
    cols = np.matmul(w.reshape(C, -1).T, x.reshape(N, C, h * wd))
    # scatter onto an uncropped canvas large enough for the output padding
    full = col2im(cols, (N, F, H + 2 * padding, W + 2 * padding), k, stride, 0, (h, wd))
    out = full[:, :, padding:padding + H, padding:padding + W] + b[None, :, None, None]
    return out, (x, (H, W))


def tconv_backward(dout, cache, w, stride=1, padding=0, output_padding=0):
    """Returns (dx, dw, db)."""
    x, (H, W) = cache
    N, C, h, wd = x.shape
    F, k = w.shape[1], w.shape[2]
    full = np.zeros((N, F, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    full[:, :, padding:padding + H, padding:padding + W] = dout
    cols, _ = _gather(full, k, stride, (h, wd))
    dx = np.matmul(w.reshape(C, -1), cols).reshape(x.shape)
    dw = np.einsum("ncl,nkl->ck", x.reshape(N, C, h * wd), cols, optimize=True).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def _gather(xp, k, s, out_hw):
    N, C = xp.shape[:2]
    oh, ow = out_hw
    cols = np.empty((N, C, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(N, C * k * k, oh * ow), out_hw


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 2
    image_size: int = 96
    encoder: tuple = ((9, 3, 3, 16), (5, 2, 2, 16), (3, 2, 1, 32))  # kernel, stride, padding, channels
    decoder: tuple = ((3, 2, 1, 1, 16), (5, 2, 2, 1, 16), (9, 3, 3, 0, 16))  # + output padding
    depth_scale: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(tuple(int(v) for v in e) for e in self.encoder))
        object.__setattr__(self, "decoder", tuple(tuple(int(v) for v in d) for d in self.decoder))
        if self.input_channels not in (1, 2):
            raise ValueError("input_channels must be 1 (depth) or 2 (depth + stiffness)")
        n = self.image_size
        for k, s, p, _ in self.encoder:
            n = _out_size(n, k, s, p)
        for k, s, p, op, _ in self.decoder:
            n = tconv_out_size(n, k, s, p, op)
        if n != self.image_size:
            raise ValueError(f"decoder output {n} does not restore input size {self.image_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = [list(e) for e in self.encoder]
        d["decoder"] = [list(e) for e in self.decoder]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(int(d["input_channels"]), int(d["image_size"]), tuple(map(tuple, d["encoder"])),
                   tuple(map(tuple, d["decoder"])), float(d["depth_scale"]))


HEADS = ("q", "cos2", "sin2", "width")


class GraspNet:
    """Encoder/decoder with four squashed 1x1 heads."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        c = config.input_channels
        for i, (k, s, p, f) in enumerate(config.encoder):
            self.params[f"enc{i}.w"] = rng.normal(0, np.sqrt(2.0 / (c * k * k)), (f, c, k, k))
            self.params[f"enc{i}.b"] = np.zeros(f)
            c = f
        for i, (k, s, p, op, f) in enumerate(config.decoder):
            # fan-in of a transpose convolution: input channels x taps per output pixel
            fan = c * max(1, (k * k) // (s * s))
            self.params[f"dec{i}.w"] = rng.normal(0, np.sqrt(2.0 / fan), (c, f, k, k))
            self.params[f"dec{i}.b"] = np.zeros(f)
            c = f
        self.params["head.w"] = rng.normal(0, np.sqrt(1.0 / c), (4, c, 1, 1))
        self.params["head.b"] = np.zeros(4)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}

    def astype(self, dtype) -> "GraspNet":
        other = GraspNet.__new__(GraspNet)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got {x.shape}")
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"network expects {self.config.input_channels} input channel(s), got {x.shape[1]}")
        n = self.config.image_size
        if x.shape[2:] != (n, n):
            raise ShapeError(f"network expects {n}x{n} images, got {x.shape[2:]}")

    def forward(self, x, keep_cache: bool = True):
        """Returns (outputs (N,4,H,W), cache)."""
        x = np.asarray(x, dtype=self.dtype)
        self.check_input(x)
        cache = []
        h = x
        for i, (k, s, p, f) in enumerate(self.config.encoder):
            h, c1 = conv_forward(h, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"], s, p)
            h, m = relu_forward(h)
            cache.append(("enc", i, c1, m))
        for i, (k, s, p, op, f) in enumerate(self.config.decoder):
            h, c1 = tconv_forward(h, self.params[f"dec{i}.w"], self.params[f"dec{i}.b"], s, p, op)
            h, m = relu_forward(h)
            cache.append(("dec", i, c1, m))
        z, c1 = conv_forward(h, self.params["head.w"], self.params["head.b"])
        out = np.empty_like(z)
        out[:, 0] = sigmoid(z[:, 0])
        out[:, 1:3] = np.tanh(z[:, 1:3])
        out[:, 3] = sigmoid(z[:, 3])
        cache.append(("head", 0, c1, out))
        return out, (cache if keep_cache else None)

    def backward(self, dout, cache) -> dict:
        """Gradients of a scalar w.r.t. every parameter, given d(scalar)/d(outputs)."""
        grads = {}
        _, _, c1, out = cache[-1]
        dz = np.empty_like(dout)
        dz[:, 0] = dout[:, 0] * out[:, 0] * (1 - out[:, 0])
        dz[:, 1:3] = dout[:, 1:3] * (1 - out[:, 1:3] ** 2)
        dz[:, 3] = dout[:, 3] * out[:, 3] * (1 - out[:, 3])
        dh, grads["head.w"], grads["head.b"] = conv_backward(dz, c1, self.params["head.w"])
        for kind, i, c1, m in reversed(cache[:-1]):
            dh = relu_backward(dh, m)
            if kind == "dec":
                k, s, p, op, f = self.config.decoder[i]
                dh, grads[f"dec{i}.w"], grads[f"dec{i}.b"] = tconv_backward(dh, c1, self.params[f"dec{i}.w"], s, p, op)
            else:
                k, s, p, f = self.config.encoder[i]
                dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv_backward(dh, c1, self.params[f"enc{i}.w"], s, p)
        return grads

    def predict(self, x) -> np.ndarray:
        out, _ = self.forward(x, keep_cache=False)
        return out


def input_planes(samples, config: NetConfig, dtype=np.float32) -> np.ndarray:
    """Stack network inputs: height above the table (scaled) and optionally stiffness."""
    xs = []
    for s in samples:
        cam_h = float(s.metadata["camera"]["camera_height"])
        height = (cam_h - s.image.depth) / config.depth_scale
        planes = [height] if config.input_channels == 1 else [height, s.image.stiffness]
        xs.append(np.stack(planes))
    return np.asarray(xs, dtype=dtype)


def target_planes(samples, dtype=np.float32) -> np.ndarray:
    return np.asarray([s.maps.stack() for s in samples], dtype=dtype)


# --------------------------------------------------------------------------
# loss


def loss(pred, target, weights=(1.0, 1.0, 1.0, 1.0)):
    """Weighted per-head MSE; angle and width terms only where target Q > 0.

    Returns (total, per-head dict, d total / d pred).
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    grad = np.zeros_like(pred)
    mask = target[:, 0] > 0
    n_all = pred[:, 0].size
    n_mask = int(mask.sum())
    terms = {}
    diff = pred[:, 0] - target[:, 0]
    terms["q"] = float(np.sum(diff * diff) / n_all)
    grad[:, 0] = weights[0] * 2 * diff / n_all
    for c, name in ((1, "cos2"), (2, "sin2"), (3, "width")):
        if n_mask == 0:
            terms[name] = 0.0
            continue
        diff = (pred[:, c] - target[:, c]) * mask
        terms[name] = float(np.sum(diff * diff) / n_mask)
        grad[:, c] = weights[c] * 2 * diff / n_mask
    total = sum(w * terms[h] for w, h in zip(weights, HEADS))
    return float(total), terms, grad


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    momentum: float = 0.9
    divergence_limit: float = 1e3

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs >= 0):
            raise ValueError("learning rate, batch size and epochs must be positive")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


class Optimizer:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        lr = self.cfg.learning_rate
        for k in params:
            g = grads[k].astype(params[k].dtype)
            if self.cfg.optimizer == "sgd":
                self.m[k] = self.cfg.momentum * self.m[k] + g
                params[k] -= lr * self.m[k]
                continue
            b1, b2, eps = 0.9, 0.999, 1e-8
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            params[k] -= (lr * mh / (np.sqrt(vh) + eps)).astype(params[k].dtype)


def evaluate_loss(net: GraspNet, x, y, weights, batch_size: int = 16):
    """Sample-weighted mean of the batch losses."""
    if len(x) == 0:
        return float("nan"), {h: float("nan") for h in HEADS}
    total, heads = 0.0, {h: 0.0 for h in HEADS}
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        out = net.predict(xb)
        l, t, _ = loss(out, yb, weights)
        total += l * len(xb)
        for h in HEADS:
            heads[h] += t[h] * len(xb)
    return total / len(x), {h: v / len(x) for h, v in heads.items()}


@dataclass
class TrainResult:
    net: GraspNet
    best_epoch: int
    history: list = field(default_factory=list)


def train(net: GraspNet, x_train, y_train, x_val, y_val, cfg: TrainConfig,
          checkpoint=None, progress=None) -> TrainResult:
    """Mini-batch training; keeps the weights with the lowest validation loss.

    Epoch 0 in the history is the untrained network. Validation falls back to
    the training set when no validation data is given.
    """
    if len(x_train) == 0:
        raise ValueError("empty training set")
    if x_val is None or len(x_val) == 0:
        x_val, y_val = x_train, y_train
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(net.params, cfg)
    w = cfg.loss_weights
    val, _ = evaluate_loss(net, x_val, y_val, w)
    tr, heads = evaluate_loss(net, x_train, y_train, w)
    history = [{"epoch": 0, "train_loss": tr, "val_loss": val, **{f"train_{h}": heads[h] for h in HEADS}}]
    best = (val, 0, {k: v.copy() for k, v in net.params.items()})
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_train))
        total, heads = 0.0, {h: 0.0 for h in HEADS}
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            out, cache = net.forward(x_train[idx])
            l, t, g = loss(out, y_train[idx], w)
            if not np.isfinite(l) or l > cfg.divergence_limit:
                path = None
                if checkpoint is not None:
                    save_weights(checkpoint, _with_params(net, best[2]))
                    path = str(checkpoint)
                raise TrainingDivergence(f"loss {l:g} at epoch {epoch}", path)
            grads = net.backward(g, cache)
            opt.step(net.params, grads)
            total += l * len(idx)
            for h in HEADS:
                heads[h] += t[h] * len(idx)
        tr = total / len(order)
        val, _ = evaluate_loss(net, x_val, y_val, w)
        history.append({"epoch": epoch, "train_loss": tr, "val_loss": val,
                        **{f"train_{h}": heads[h] / len(order) for h in HEADS}})
        if val < best[0]:
            best = (val, epoch, {k: v.copy() for k, v in net.params.items()})
        if progress:
            progress(history[-1])
    net.params = best[2]
    return TrainResult(net, best[1], history)


def _with_params(net: GraspNet, params: dict) -> GraspNet:
    other = net.astype(net.dtype)
    other.params = {k: v.copy() for k, v in params.items()}
    return other


def write_metrics_csv(path, history) -> None:
    cols = ["epoch", "train_loss", "val_loss"] + [f"train_{h}" for h in HEADS]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for row in history:
            wr.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


# --------------------------------------------------------------------------
# weight files
#
# magic "GSNW" | u16 version | u32 config length | config JSON
# | u32 parameter count | float32 little-endian parameters (sorted by name)
# | u32 CRC32 of everything before it.

WEIGHTS_MAGIC = b"GSNW"
WEIGHTS_VERSION = 1


def encode_weights(net: GraspNet) -> bytes:
    names = sorted(net.params)
    cfg = json.dumps({"net": net.config.to_dict(), "params": {n: list(net.params[n].shape) for n in names}},
                     sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes() for n in names)
    body = WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(cfg)) + cfg + struct.pack("<I", len(blob) // 4) + blob
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(path, net: GraspNet) -> None:
    Path(path).write_bytes(encode_weights(net))


def decode_weights(data: bytes, expected: NetConfig | None = None) -> GraspNet:
    if len(data) < 14 or data[:4] != WEIGHTS_MAGIC:
        raise WeightsError("not a GSNW weight file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightsError("CRC mismatch: weight file is corrupt")
    version, n_cfg = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weight file version {version}")
    off = 10
    header = json.loads(data[off:off + n_cfg])
    off += n_cfg
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    config = NetConfig.from_dict(header["net"])
    if expected is not None:
        want, got = expected.to_dict(), config.to_dict()
        for key in want:
            if want[key] != got.get(key):
                raise WeightsError(f"config mismatch in field {key!r}: file has {got.get(key)!r}, expected {want[key]!r}")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    net = GraspNet.__new__(GraspNet)
    net.config = config
    net.dtype = np.dtype(np.float32)
    net.params = {}
    pos = 0
    for name in sorted(header["params"]):
        shape = tuple(header["params"][name])
        n = int(np.prod(shape))
        net.params[name] = flat[pos:pos + n].reshape(shape).astype(np.float32)
        pos += n
    if pos != count:
        raise WeightsError("parameter count does not match the header")
    return net


def load_weights(path, expected: NetConfig | None = None) -> GraspNet:
    return decode_weights(Path(path).read_bytes(), expected)
