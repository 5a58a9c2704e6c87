import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stiffgrasp.net import (
    GraspNet,
    NetConfig,
    ShapeError,
    TrainConfig,
    TrainingDivergence,
    WeightsError,
    col2im,
    conv_backward,
    conv_forward,
    decode_weights,
    encode_weights,
    im2col,
    input_planes,
    load_weights,
    loss,
    relu_backward,
    relu_forward,
    save_weights,
    sigmoid,
    tconv_backward,
    tconv_forward,
    train,
    write_metrics_csv,
)
from stiffgrasp.imaging import CameraModel, GraspMaps, SceneImage, SceneSample

SMALL = NetConfig(image_size=24, encoder=((9, 3, 3, 3), (5, 2, 2, 3), (3, 2, 1, 4)),
                  decoder=((3, 2, 1, 1, 3), (5, 2, 2, 1, 3), (9, 3, 3, 0, 3)))


def dot64(a, r):
    """Objective reduction in float64 so float32 forward passes are the only rounding source."""
    return float(np.sum(np.asarray(a, np.float64) * np.asarray(r, np.float64)))


def rel_err(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def numeric_grad(f, x, eps):
    """Central differences of scalar f over every entry of x, perturbed in place.

    The step is measured after rounding to x's dtype, which matters in float32.
    """
    g = np.zeros(x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = float(x[i])
        fp = f()
        x[i] = old - eps
        lo = float(x[i])
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (hi - lo)
    return g


# float64 shadow: eps 1e-6, tolerance 1e-6; float32: eps 1e-3, tolerance 1e-3
PRECISIONS = [(np.float64, 1e-6, 1e-6), (np.float32, 1e-3, 1e-3)]


def randomized_net(config, seed, dtype=np.float64):
    # random biases keep pre-activations off the ReLU kink
    net = GraspNet(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for k, v in net.params.items():
        if k.endswith(".b"):
            net.params[k] = rng.normal(0, 0.3, v.shape)
    return net.astype(dtype)


def random_targets(rng, shape):
    y = np.zeros(shape)
    mask = rng.random(shape[:1] + shape[2:]) < 0.2
    ang = rng.uniform(0, np.pi, mask.sum())
    y[:, 0][mask] = rng.uniform(0.5, 1, mask.sum())
    y[:, 1][mask] = np.cos(2 * ang)
    y[:, 2][mask] = np.sin(2 * ang)
    y[:, 3][mask] = rng.uniform(0.1, 1, mask.sum())
    return y


# -- primitives -------------------------------------------------------------


def test_im2col_col2im_adjoint(rng):
    x = rng.standard_normal((2, 3, 11, 9))
    cols, hw = im2col(x, 3, 2, 1)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * col2im(c, x.shape, 3, 2, 1, hw))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 7, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, _ = conv_forward(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for f in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f]) + b[f]
    assert np.allclose(out, ref, atol=1e-12)


def test_tconv_matches_direct_scatter(rng):
    x = rng.standard_normal((1, 2, 4, 3))
    w = rng.standard_normal((2, 3, 5, 5))
    b = rng.standard_normal(3)
    s, p, op = 2, 2, 1
    out, _ = tconv_forward(x, w, b, s, p, op)
    H, W = out.shape[2:]
    full = np.zeros((1, 3, (4 - 1) * s + 5 + op, (3 - 1) * s + 5 + op))
    for c in range(2):
        for i in range(4):
            for j in range(3):
                full[0, :, i * s:i * s + 5, j * s:j * s + 5] += x[0, c, i, j] * w[c]
    ref = full[:, :, p:p + H, p:p + W] + b[None, :, None, None]
    assert np.allclose(out, ref, atol=1e-12)


def test_tconv_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 3, 12, 12))
    w = rng.standard_normal((4, 3, 5, 5))
    y, _ = conv_forward(x, w, np.zeros(4), 2, 2)
    r = rng.standard_normal(y.shape)
    # conv weights (F,C,k,k) act as transpose-conv weights mapping F -> C
    xt, _ = tconv_forward(r, w, np.zeros(3), 2, 2, 1)
    assert np.sum(y * r) == pytest.approx(np.sum(x * xt), rel=1e-10)


@pytest.mark.parametrize("dtype, eps, tol", PRECISIONS)
@pytest.mark.parametrize("stride, pad", [(1, 0), (2, 1), (3, 3)])
def test_conv_gradients(rng, dtype, eps, tol, stride, pad):
    x = rng.standard_normal((2, 2, 10, 9)).astype(dtype)
    w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    out, cache = conv_forward(x, w, b, stride, pad)
    r = rng.standard_normal(out.shape).astype(dtype)
    dx, dw, db = conv_backward(r, cache, w, stride, pad)
    f = lambda: dot64(conv_forward(x, w, b, stride, pad)[0], r)  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x, eps)) < tol
    assert rel_err(dw, numeric_grad(f, w, eps)) < tol
    assert rel_err(db, numeric_grad(f, b, eps)) < tol


@pytest.mark.parametrize("dtype, eps, tol", PRECISIONS)
@pytest.mark.parametrize("k, stride, pad, op", [(3, 2, 1, 1), (5, 2, 2, 1), (9, 3, 3, 0), (3, 1, 0, 0)])
def test_tconv_gradients(rng, dtype, eps, tol, k, stride, pad, op):
    x = rng.standard_normal((2, 3, 4, 5)).astype(dtype)
    w = rng.standard_normal((3, 2, k, k)).astype(dtype)
    b = rng.standard_normal(2).astype(dtype)
    out, cache = tconv_forward(x, w, b, stride, pad, op)
    r = rng.standard_normal(out.shape).astype(dtype)
    dx, dw, db = tconv_backward(r, cache, w, stride, pad, op)
    f = lambda: dot64(tconv_forward(x, w, b, stride, pad, op)[0], r)  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x, eps)) < tol
    assert rel_err(dw, numeric_grad(f, w, eps)) < tol
    assert rel_err(db, numeric_grad(f, b, eps)) < tol


@pytest.mark.parametrize("dtype, eps, tol", PRECISIONS)
def test_relu_and_sigmoid_gradients(rng, dtype, eps, tol):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 0.01] = 0.5  # keep clear of the kink by more than eps
    x = x.astype(dtype)
    r = rng.standard_normal(x.shape).astype(dtype)
    y, mask = relu_forward(x)
    d = relu_backward(r, mask)
    assert rel_err(d, numeric_grad(lambda: dot64(np.maximum(x, 0), r), x, eps)) < tol
    s = sigmoid(x)
    ds = r * s * (1 - s)
    assert rel_err(ds, numeric_grad(lambda: dot64(sigmoid(x), r), x, eps)) < tol


def test_identity_1x1_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    out, _ = conv_forward(x, np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    assert np.array_equal(out, x)


def test_hand_computed_correlation():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    w = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]).reshape(1, 1, 3, 3)
    out, _ = conv_forward(x, w, np.array([1.0]))
    # the discrete Laplacian of a linear ramp is zero; only the bias remains
    assert np.array_equal(out, np.ones((1, 1, 3, 3)))
    w2 = np.zeros((1, 1, 3, 3))
    w2[0, 0, 0, 2] = 1.0
    out2, _ = conv_forward(x, w2, np.zeros(1))
    assert out2[0, 0].tolist() == [[2, 3, 4], [7, 8, 9], [12, 13, 14]]


def test_sigmoid_is_stable():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s.tolist() == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("dtype, eps, tol", PRECISIONS)
def test_loss_gradient(rng, dtype, eps, tol):
    pred = rng.uniform(-0.9, 0.9, (2, 4, 6, 5)).astype(dtype)
    target = random_targets(rng, pred.shape).astype(dtype)
    w = (1.0, 0.5, 0.5, 2.0)
    _, _, g = loss(pred, target, w)
    num = numeric_grad(lambda: loss(pred.astype(np.float64), target.astype(np.float64), w)[0], pred, eps)
    assert rel_err(g, num) < tol


def test_loss_closed_forms(rng):
    t = random_targets(rng, (2, 4, 5, 5))
    assert loss(t, t)[0] == 0.0
    pred = np.zeros((1, 4, 4, 4))
    pred[:, 0] = 0.5
    total, terms, _ = loss(pred, np.zeros_like(pred))
    assert terms["q"] == 0.25 and total == 0.25


def test_loss_masks_angle_and_width():
    pred = np.zeros((1, 4, 3, 3))
    target = np.zeros((1, 4, 3, 3))
    target[0, 1] = 5.0  # angle targets off the label mask are ignored
    total, terms, _ = loss(pred, target)
    assert total == 0.0 and terms["cos2"] == 0.0
    target[0, 0, 1, 1] = 1.0
    target[0, 3, 1, 1] = 0.5
    _, terms, _ = loss(pred, target)
    assert terms["q"] == pytest.approx(1 / 9)
    assert terms["width"] == pytest.approx(0.25)


# -- full network -----------------------------------------------------------


@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
@pytest.mark.parametrize("seed", [3, 4, 5])
def test_full_network_gradient(dtype, tol, seed):
    # float32 FD steps large enough to beat roundoff cross ReLU kinks somewhere in a
    # deep net, so the oracle is always central differences on the float64 shadow
    rng = np.random.default_rng(seed)
    net = randomized_net(SMALL, seed=seed, dtype=dtype)
    shadow = net.astype(np.float64)
    x = rng.standard_normal((2, 2, 24, 24)).astype(dtype)
    y = random_targets(rng, (2, 4, 24, 24)).astype(dtype)
    out, cache = net.forward(x)
    _, _, g = loss(out, y)
    grads = net.backward(g, cache)
    x64, y64 = x.astype(np.float64), y.astype(np.float64)

    def f():
        return loss(shadow.forward(x64, keep_cache=False)[0], y64)[0]

    for name, p in shadow.params.items():
        num = numeric_grad(f, p, 1e-6)
        assert rel_err(grads[name], num) < tol, name


def test_output_ranges(rng):
    net = GraspNet(SMALL, seed=0)
    out = net.predict(rng.standard_normal((3, 2, 24, 24)))
    assert out.shape == (3, 4, 24, 24)
    assert np.all((out[:, 0] >= 0) & (out[:, 0] <= 1) & (out[:, 3] >= 0) & (out[:, 3] <= 1))
    assert np.all(np.abs(out[:, 1:3]) <= 1)


def test_translation_covariance():
    # the total encoder stride is 3 * 2 * 2 = 12 px
    rng = np.random.default_rng(0)
    net = randomized_net(NetConfig(), seed=2)
    x = np.zeros((1, 2, 96, 96))
    x[:, :, 24:60, 20:56] = rng.random((1, 2, 36, 36))
    a = net.predict(x)
    b = net.predict(np.roll(x, (12, 12), axis=(2, 3)))
    # zero padding reaches ~28 px into the output once biases are nonzero
    m = 32
    assert np.allclose(b[..., 12 + m:96 - m, 12 + m:96 - m], a[..., m:84 - m, m:84 - m], atol=1e-12)


def _samples(n, rng, cam=CameraModel()):
    out = []
    for _ in range(n):
        depth = np.full(cam.shape, cam.camera_height, np.float32)
        depth[30:60, 40:70] = cam.camera_height - 0.05
        st = np.zeros(cam.shape, np.float32)
        st[30:60, 40:70] = rng.random()
        out.append(SceneSample(SceneImage(depth, st), GraspMaps.zeros(cam.shape), {"camera": cam.to_dict()}))
    return out


def test_depth_only_ignores_stiffness(rng):
    samples = _samples(2, rng)
    net = GraspNet(NetConfig(input_channels=1), seed=0)
    a = net.predict(input_planes(samples, net.config))
    for s in samples:
        s.image.stiffness[:] = rng.random(s.image.stiffness.shape)
    b = net.predict(input_planes(samples, net.config))
    assert np.array_equal(a, b)


def test_input_planes_scaling(rng):
    (s,) = _samples(1, rng)
    x = input_planes([s], NetConfig())
    assert x.shape == (1, 2, 96, 96)
    assert x[0, 0].max() == pytest.approx(1.0) and x[0, 0].min() == 0.0
    assert np.array_equal(x[0, 1], s.image.stiffness)


def test_channel_mismatch_raises(rng):
    net = GraspNet(SMALL, seed=0)
    with pytest.raises(ShapeError, match="channel"):
        net.predict(np.zeros((1, 1, 24, 24)))
    with pytest.raises(ShapeError):
        net.predict(np.zeros((1, 2, 20, 20)))


def test_bad_config():
    with pytest.raises(ValueError):
        NetConfig(image_size=95)
    with pytest.raises(ValueError):
        NetConfig(input_channels=3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2]))
def test_weights_round_trip_byte_exact(seed, channels):
    cfg = NetConfig(input_channels=channels, image_size=SMALL.image_size, encoder=SMALL.encoder,
                    decoder=SMALL.decoder)
    net = GraspNet(cfg, seed=seed)
    data = encode_weights(net)
    back = decode_weights(data, cfg)
    assert encode_weights(back) == data
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)


def test_weights_file_errors(tmp_path):
    net = GraspNet(SMALL, seed=0)
    save_weights(tmp_path / "w.gsnw", net)
    data = (tmp_path / "w.gsnw").read_bytes()
    assert data[:4] == b"GSNW"
    with pytest.raises(WeightsError, match="CRC"):
        decode_weights(data[:-5] + bytes([data[-5] ^ 1]) + data[-4:])
    with pytest.raises(WeightsError):
        decode_weights(b"NOPE" + data[4:])
    other = NetConfig(input_channels=1, image_size=24, encoder=SMALL.encoder, decoder=SMALL.decoder)
    with pytest.raises(WeightsError, match="input_channels"):
        load_weights(tmp_path / "w.gsnw", other)


def _toy_data(rng, n=6):
    x = rng.random((n, 2, 24, 24)).astype(np.float32)
    y = random_targets(rng, (n, 4, 24, 24)).astype(np.float32)
    return x, y


def test_training_reduces_loss_and_is_reproducible(rng, tmp_path):
    x, y = _toy_data(rng)
    cfg = TrainConfig(epochs=15, batch_size=3, learning_rate=3e-3)
    r1 = train(GraspNet(SMALL, seed=1), x, y, x[:2], y[:2], cfg)
    r2 = train(GraspNet(SMALL, seed=1), x, y, x[:2], y[:2], cfg)
    assert r1.history[-1]["train_loss"] < r1.history[0]["train_loss"]
    write_metrics_csv(tmp_path / "a.csv", r1.history)
    write_metrics_csv(tmp_path / "b.csv", r2.history)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,train_q,train_cos2,train_sin2,train_width"
    assert encode_weights(r1.net) == encode_weights(r2.net)
    assert r1.history[r1.best_epoch]["val_loss"] == min(h["val_loss"] for h in r1.history)


def test_sgd_option(rng):
    x, y = _toy_data(rng, 4)
    r = train(GraspNet(SMALL, seed=0), x, y, None, None, TrainConfig(optimizer="sgd", epochs=5, learning_rate=0.05))
    assert np.isfinite(r.history[-1]["train_loss"])


def test_divergence_saves_last_good(rng, tmp_path):
    x, y = _toy_data(rng, 4)
    cfg = TrainConfig(epochs=50, learning_rate=1e6, divergence_limit=1.5, optimizer="sgd")
    with pytest.raises(TrainingDivergence) as exc:
        train(GraspNet(SMALL, seed=0), x, y, None, None, cfg, checkpoint=tmp_path / "ck.gsnw")
    assert exc.value.checkpoint == str(tmp_path / "ck.gsnw")
    load_weights(exc.value.checkpoint, SMALL)


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
