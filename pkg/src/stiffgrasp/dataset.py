"""Deterministic dataset generation, GSDS sample files and object-level splits.

A scene is one (object, Young's modulus) pair: its grasp candidates are
sampled once per object, labelled by simulation at that stiffness, and then
emitted as ``augmentations`` randomly transformed samples.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fem import Material, SimConfig
from .geometry import LIBRARY, ShapeSpec, generate_shape, jitter_spec, region_materials
from .grasp import (
    GripperConfig,
    SamplingError,
    ShakeSchedule,
    filter_collisions,
    label_grasps,
    sample_antipodal,
    trial_log_line,
)
from .imaging import (
    AugmentParams,
    CameraModel,
    GraspMaps,
    SceneImage,
    SceneSample,
    augment,
    encode_maps,
    render_scene,
)

log = logging.getLogger(__name__)

E_SWEEP = (2e4, 2e5, 2e7, 2e9)
MANIFEST_VERSION = 1

# Trial physics used for labelling and evaluation. The gripper squeezes with
# 3 N (a 20 N squeeze crushes every 2e4 Pa object), the shake runs at 5 Hz and
# the integrator takes one 2 ms step per frame to keep a trial near 0.2 s.
TRIAL_GRIPPER = GripperConfig(force_limit=3.0)
TRIAL_SCHEDULE = ShakeSchedule(frequency=5.0)
TRIAL_SIM = SimConfig(dt=2e-3, substeps=1)


class DatasetError(RuntimeError):
    """Generation failed or a manifest is inconsistent."""


class SampleFormatError(ValueError):
    """Base class for GSDS read errors."""


class HeaderError(SampleFormatError):
    pass


class VersionError(SampleFormatError):
    pass


class ChecksumError(SampleFormatError):
    def __init__(self, section: str, msg: str = ""):
        super().__init__(f"checksum mismatch in {section}" + (f": {msg}" if msg else ""))
        self.section = section


# --------------------------------------------------------------------------
# configuration


def _material_defaults() -> dict:
    return {"poisson_ratio": 0.3, "density": 1000.0, "rayleigh_alpha": 1.0, "rayleigh_beta": 1e-3}


@dataclass
class DatasetConfig:
    objects: list = field(default_factory=list)
    e_sweep: tuple = E_SWEEP
    augmentations: int = 15
    camera: CameraModel = field(default_factory=CameraModel)
    gripper: GripperConfig = TRIAL_GRIPPER
    schedule: ShakeSchedule = TRIAL_SCHEDULE
    sim: SimConfig = TRIAL_SIM
    material: dict = field(default_factory=_material_defaults)
    master_seed: int = 0
    split_fractions: dict = field(default_factory=lambda: {"train": 0.75, "val": 0.25})
    edge_length: float = 0.007
    n_candidates: int = 200
    max_labeled: int = 40
    positive_threshold: float = 0.5
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        self.e_sweep = tuple(float(e) for e in self.e_sweep)
        self.validate()

    def validate(self):
        for e in self.e_sweep:
            if not 2e4 <= e <= 2e9:
                raise ValueError(f"e_sweep: value {e:g} outside [2e4, 2e9]")
        if self.augmentations < 0:
            raise ValueError("augmentations must be >= 0")
        if abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if any(f < 0 for f in self.split_fractions.values()):
            raise ValueError("split_fractions must be non-negative")
        if self.max_labeled < 1 or self.n_candidates < 1:
            raise ValueError("n_candidates and max_labeled must be >= 1")

    def to_dict(self) -> dict:
        return {
            "objects": [s.to_dict() for s in self.objects],
            "e_sweep": list(self.e_sweep),
            "augmentations": self.augmentations,
            "camera": self.camera.to_dict(),
            "gripper": self.gripper.to_dict(),
            "schedule": self.schedule.to_dict(),
            "sim": self.sim.to_dict(),
            "material": dict(self.material),
            "master_seed": self.master_seed,
            "split_fractions": dict(self.split_fractions),
            "edge_length": self.edge_length,
            "n_candidates": self.n_candidates,
            "max_labeled": self.max_labeled,
            "positive_threshold": self.positive_threshold,
            "augment": {"rotation": list(self.augment.rotation), "zoom": list(self.augment.zoom),
                        "translation": self.augment.translation, "max_attempts": self.augment.max_attempts},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        base = cls(objects=[])
        kw = {}
        if "objects" in d:
            kw["objects"] = [ShapeSpec.from_dict(o) for o in d["objects"]]
        for key in ("e_sweep", "augmentations", "master_seed", "edge_length", "n_candidates",
                    "max_labeled", "positive_threshold", "split_fractions", "material"):
            if key in d:
                kw[key] = d[key]
        if "camera" in d:
            kw["camera"] = CameraModel.from_dict({**base.camera.to_dict(), **d["camera"]})
        if "gripper" in d:
            kw["gripper"] = GripperConfig(**{**base.gripper.to_dict(), **d["gripper"]})
        if "schedule" in d:
            sch = {**base.schedule.to_dict(), **d["schedule"]}
            kw["schedule"] = ShakeSchedule(tuple(sch["levels"]), int(sch["cycles"]), float(sch["frequency"]))
        if "sim" in d:
            kw["sim"] = SimConfig.from_dict({**base.sim.to_dict(), **d["sim"]})
        if "augment" in d:
            a = d["augment"]
            kw["augment"] = AugmentParams(tuple(a.get("rotation", base.augment.rotation)),
                                          tuple(a.get("zoom", base.augment.zoom)),
                                          float(a.get("translation", base.augment.translation)),
                                          int(a.get("max_attempts", base.augment.max_attempts)))
        if "material" in d:
            kw["material"] = {**_material_defaults(), **d["material"]}
        return replace(base, **kw) if kw else base

    def material_for(self, E: float) -> Material:
        return Material(float(E), **self.material)

    @property
    def n_samples(self) -> int:
        return len(self.objects) * len(self.e_sweep) * self.augmentations


def training_objects(n: int, seed: int = 0, library=LIBRARY) -> list:
    """``n`` jittered primitives, cycling through the shape library."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 7919, i])
        out.append(jitter_spec(library[i % len(library)], rng))
    return out


def desk_preset(seed: int = 0) -> DatasetConfig:
    """12 objects x 4 E x 15 augmentations = 720 samples."""
    return DatasetConfig(objects=training_objects(12, seed), augmentations=15, master_seed=seed)


def paper_preset(seed: int = 0) -> DatasetConfig:
    """30 objects x 4 E x 45 augmentations = 5400 samples."""
    return DatasetConfig(objects=training_objects(30, seed), augmentations=45, master_seed=seed)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from the given integers."""
    text = ":".join(str(int(p)) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# --------------------------------------------------------------------------
# GSDS sample files
#
# magic "GSDS" | u16 version | u16 height | u16 width | u32 metadata length
# | metadata (UTF-8 JSON, sorted keys) | u32 CRC32 of metadata
# | 6 planes float32 row-major (depth, stiffness, Q, cos2, sin2, W)
# | 6 x u32 CRC32, one per plane.  All integers little-endian.

MAGIC = b"GSDS"
FORMAT_VERSION = 1
PLANE_NAMES = ("depth", "stiffness", "q", "cos2", "sin2", "width")
_HEAD = struct.Struct("<4sHHHI")


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_sample(sample: SceneSample) -> bytes:
    planes = sample.planes()
    _, H, W = planes.shape
    meta = _meta_bytes(sample.metadata)
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, H, W, len(meta)), meta, struct.pack("<I", zlib.crc32(meta))]
    blobs = [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in planes]
    parts.extend(blobs)
    parts.append(struct.pack("<6I", *(zlib.crc32(b) for b in blobs)))
    return b"".join(parts)


def decode_sample(data: bytes) -> SceneSample:
    if len(data) < _HEAD.size:
        raise ChecksumError("header", "file truncated")
    magic, version, H, W, n_meta = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported GSDS version {version} (expected {FORMAT_VERSION})")
    plane_bytes = 4 * H * W
    expected = _HEAD.size + n_meta + 4 + 6 * plane_bytes + 24
    if len(data) != expected:
        raise ChecksumError("payload", f"length {len(data)} != expected {expected}")
    off = _HEAD.size
    meta_raw = data[off:off + n_meta]
    off += n_meta
    (meta_crc,) = struct.unpack_from("<I", data, off)
    off += 4
    if zlib.crc32(meta_raw) != meta_crc:
        raise ChecksumError("metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable metadata: {exc}") from exc
    blobs = [data[off + i * plane_bytes: off + (i + 1) * plane_bytes] for i in range(6)]
    crcs = struct.unpack_from("<6I", data, off + 6 * plane_bytes)
    planes = []
    for name, blob, crc in zip(PLANE_NAMES, blobs, crcs):
        if zlib.crc32(blob) != crc:
            raise ChecksumError(name)
        planes.append(np.frombuffer(blob, dtype="<f4").reshape(H, W).astype(np.float32))
    return SceneSample(SceneImage(planes[0], planes[1]), GraspMaps(*planes[2:]), meta)


def write_sample(sample: SceneSample, path) -> str:
    """Write a GSDS file; returns the SHA-256 of its bytes."""
    data = encode_sample(sample)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_sample(path) -> SceneSample:
    return decode_sample(Path(path).read_bytes())


# --------------------------------------------------------------------------
# generation


def _scene_key(cfg: DatasetConfig, obj: int, e_index: int) -> dict:
    return {"object_id": obj, "e_index": e_index, "E": cfg.e_sweep[e_index]}


def object_mesh(cfg: DatasetConfig, obj: int):
    """Mesh of training object ``obj``, centered on its area centroid."""
    spec = cfg.objects[obj]
    mesh = generate_shape(spec, cfg.edge_length, derive_seed(cfg.master_seed, obj, 0))
    return mesh.translated(-mesh.centroid())


def object_candidates(cfg: DatasetConfig, obj: int, mesh) -> list:
    """Filtered candidates (shared by every stiffness of one object)."""
    cands = sample_antipodal(mesh, math.atan(cfg.sim.friction_mu), cfg.n_candidates,
                             seed=derive_seed(cfg.master_seed, obj, 1))
    return filter_collisions(cands, mesh, cfg.gripper)[: cfg.max_labeled]


def label_scene(cfg: DatasetConfig, obj: int, e_index: int, jobs: int = 1):
    """Simulate every kept candidate for one scene.

    Returns (mesh, materials, labelled grasps, outcomes).
    """
    spec = cfg.objects[obj]
    mesh = object_mesh(cfg, obj)
    E = cfg.e_sweep[e_index]
    materials = {r: cfg.material_for(e) for r, e in region_materials(spec, E).items()}
    cands = object_candidates(cfg, obj, mesh)
    labelled, outcomes = label_grasps(mesh, materials, cands, cfg.gripper, cfg.schedule, cfg.sim, jobs=jobs,
                                      return_outcomes=True)
    return mesh, materials, labelled, outcomes


def base_sample(cfg: DatasetConfig, obj: int, e_index: int, mesh, materials, labelled) -> SceneSample:
    """Unaugmented sample of a labelled scene."""
    positives = [g for g in labelled if g.quality >= cfg.positive_threshold]
    image = render_scene(mesh, materials, cfg.camera)
    maps = encode_maps(positives, cfg.camera, cfg.gripper)
    meta = {
        "object_id": obj,
        "spec": cfg.objects[obj].to_dict(),
        "E": {str(r): m.young_modulus for r, m in sorted(materials.items())},
        "e_index": e_index,
        "camera": cfg.camera.to_dict(),
        "gripper": cfg.gripper.to_dict(),
        "grasps": [g.to_dict() for g in positives],
        "n_labelled": len(labelled),
    }
    return SceneSample(image, maps, meta)


def _scene_job(args):
    cfg, obj, e_index = args
    key = _scene_key(cfg, obj, e_index)
    try:
        mesh, materials, labelled, outcomes = label_scene(cfg, obj, e_index)
        base = base_sample(cfg, obj, e_index, mesh, materials, labelled)
    except (SamplingError, ValueError, RuntimeError) as exc:
        return key, None, [], f"{type(exc).__name__}: {exc}"
    log_lines = [trial_log_line(obj, cfg.e_sweep[e_index], g, o) for g, o in zip(labelled, outcomes)]
    samples = []
    for a in range(cfg.augmentations):
        seed = derive_seed(cfg.master_seed, obj, e_index, a)
        try:
            s = augment(base, seed, cfg.augment, cfg.camera)
            meta = dict(s.metadata)
            meta.update({"aug_index": a, "seed": seed})
            samples.append((a, SceneSample(s.image, s.maps, meta), None))
        except ValueError as exc:
            samples.append((a, None, f"{type(exc).__name__}: {exc}"))
    return key, samples, log_lines, None


def sample_id(obj: int, e_index: int, aug: int) -> str:
    return f"o{obj:03d}_e{e_index}_a{aug:03d}"


def generate_dataset(cfg: DatasetConfig, out_dir, jobs: int = 1, progress=None) -> dict:
    """Generate every sample of ``cfg`` into ``out_dir`` and return the manifest.

    The manifest is written last through an atomic rename, so its presence
    marks a complete dataset.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    jobs_list = [(cfg, o, e) for o in range(len(cfg.objects)) for e in range(len(cfg.e_sweep))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_scene_job, jobs_list))
    else:
        results = []
        for j in jobs_list:
            results.append(_scene_job(j))
            if progress:
                progress(len(results), len(jobs_list))
    entries, failures, trial_lines = [], [], []
    for key, samples, log_lines, err in results:
        obj, e_index = key["object_id"], key["e_index"]
        trial_lines.extend(log_lines)
        if err is not None:
            for a in range(cfg.augmentations):
                failures.append({"id": sample_id(obj, e_index, a), "reason": err})
            continue
        for a, s, serr in samples:
            sid = sample_id(obj, e_index, a)
            if s is None:
                failures.append({"id": sid, "reason": serr})
                continue
            rel = f"samples/{sid}.gsds"
            digest = write_sample(s, out / rel)
            entries.append({
                "id": sid, "object_id": obj, "e_index": e_index, "E": list(s.metadata["E"].values()),
                "file": rel, "split": None, "seed": s.metadata["seed"], "sha256": digest,
            })
    total = cfg.n_samples
    if total and len(failures) > 0.1 * total:
        raise DatasetError(f"{len(failures)} of {total} samples failed (limit 10%)")
    trial_log = out / "trials.tsv"
    trial_log.write_text("".join(line + "\n" for line in trial_lines))
    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "entries": entries,
        "failures": failures,
        "trial_log": {"file": "trials.tsv", "sha256": hashlib.sha256(trial_log.read_bytes()).hexdigest()},
    }
    manifest = split(manifest, cfg.split_fractions, cfg.master_seed)
    manifest["checksum"] = manifest_checksum(manifest)
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, manifest_path)
    return manifest


def regenerate_sample(cfg: DatasetConfig, obj: int, e_index: int, aug: int) -> SceneSample:
    """Rebuild a single sample without touching the rest of the dataset."""
    mesh, materials, labelled, _ = label_scene(cfg, obj, e_index)
    base = base_sample(cfg, obj, e_index, mesh, materials, labelled)
    seed = derive_seed(cfg.master_seed, obj, e_index, aug)
    s = augment(base, seed, cfg.augment, cfg.camera)
    meta = dict(s.metadata)
    meta.update({"aug_index": aug, "seed": seed})
    return SceneSample(s.image, s.maps, meta)


def manifest_checksum(manifest: dict) -> str:
    """SHA-256 over the sorted per-sample digests."""
    h = hashlib.sha256()
    for e in sorted(manifest["entries"], key=lambda e: e["id"]):
        h.update(f"{e['id']}:{e['sha256']}\n".encode())
    return h.hexdigest()


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    m = json.loads(p.read_text())
    m["_root"] = str(p.parent)
    return m


def verify_manifest(manifest: dict) -> None:
    """Every entry exists with a matching digest and every sample file is referenced."""
    root = Path(manifest["_root"])
    seen = set()
    for e in manifest["entries"]:
        f = root / e["file"]
        if not f.exists():
            raise DatasetError(f"missing sample file {e['file']}")
        if hashlib.sha256(f.read_bytes()).hexdigest() != e["sha256"]:
            raise DatasetError(f"digest mismatch for {e['file']}")
        seen.add(f.resolve())
    for f in (root / "samples").glob("*"):
        if f.resolve() not in seen:
            raise DatasetError(f"unreferenced file {f.name}")


def split(manifest: dict, fractions: dict, seed: int) -> dict:
    """Assign split tags per base object so no object spans two splits."""
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    objects = sorted({e["object_id"] for e in manifest["entries"]})
    names = [k for k, v in fractions.items() if v > 0]
    if len(objects) < len(names):
        raise DatasetError(f"{len(objects)} objects cannot fill {len(names)} splits")
    rng = np.random.default_rng([seed, 104729])
    order = [objects[i] for i in rng.permutation(len(objects))]
    counts = [int(math.floor(fractions[n] * len(objects) + 0.5)) for n in names]
    counts[-1] = len(objects) - sum(counts[:-1])
    # every named split receives at least one object
    for i in range(len(counts)):
        while counts[i] < 1:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    tag = {}
    pos = 0
    for n, c in zip(names, counts):
        for o in order[pos:pos + c]:
            tag[o] = n
        pos += c
    out = dict(manifest)
    out["entries"] = [dict(e, split=tag[e["object_id"]]) for e in manifest["entries"]]
    out["splits"] = {n: sorted(o for o, t in tag.items() if t == n) for n in names}
    return out


def entries_for(manifest: dict, split_name: str) -> list:
    return [e for e in manifest["entries"] if e["split"] == split_name]


def load_split(manifest: dict, split_name: str) -> list:
    root = Path(manifest["_root"])
    return [read_sample(root / e["file"]) for e in entries_for(manifest, split_name)]
