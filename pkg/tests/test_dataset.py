import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stiffgrasp import dataset as ds
from stiffgrasp.geometry import LIBRARY
from stiffgrasp.grasp import GraspRect
from stiffgrasp.imaging import CameraModel, GraspMaps, SceneImage, SceneSample, encode_maps


def tiny_config(seed=0, **kw):
    return ds.DatasetConfig(objects=[LIBRARY[11], LIBRARY[1]], e_sweep=(2e5, 2e9), augmentations=2,
                            n_candidates=20, max_labeled=4, master_seed=seed,
                            split_fractions={"train": 0.5, "val": 0.5}, **kw)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    return cfg, out, ds.generate_dataset(cfg, out)


def random_sample(seed=0):
    rng = np.random.default_rng(seed)
    cam = CameraModel(width=16, height=12)
    img = SceneImage(rng.random(cam.shape, dtype=np.float32), rng.random(cam.shape, dtype=np.float32))
    maps = GraspMaps(*(rng.random(cam.shape, dtype=np.float32) for _ in range(4)))
    return SceneSample(img, maps, {"object_id": 3, "note": "x", "camera": cam.to_dict()})


def test_presets_sample_counts():
    assert ds.desk_preset().n_samples == 720
    assert ds.paper_preset().n_samples == 5400


def test_config_rejects_out_of_range_E():
    with pytest.raises(ValueError, match="e_sweep"):
        ds.DatasetConfig(e_sweep=(1e3,))


def test_config_round_trip():
    cfg = ds.desk_preset(3)
    assert ds.DatasetConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_derive_seed_is_stable_and_distinct():
    assert ds.derive_seed(0, 1, 2) == ds.derive_seed(0, 1, 2)
    assert ds.derive_seed(0, 1, 2) != ds.derive_seed(0, 2, 1)
    assert 0 <= ds.derive_seed(5) < 2**63


def test_sample_round_trip_is_byte_exact():
    s = random_sample()
    data = ds.encode_sample(s)
    back = ds.decode_sample(data)
    assert ds.encode_sample(back) == data
    assert np.array_equal(back.planes(), s.planes())
    assert back.metadata == s.metadata


def test_sample_layout_by_hand():
    s = random_sample()
    data = ds.encode_sample(s)
    magic, version, H, W, n = struct.unpack_from("<4sHHHI", data, 0)
    assert (magic, version, H, W) == (b"GSDS", 1, 12, 16)
    meta = data[14:14 + n]
    assert json.loads(meta) == s.metadata
    off = 14 + n + 4
    depth = np.frombuffer(data, "<f4", count=H * W, offset=off).reshape(H, W)
    assert np.array_equal(depth, s.image.depth)
    crcs = struct.unpack_from("<6I", data, off + 6 * 4 * H * W)
    assert crcs[0] == zlib.crc32(data[off:off + 4 * H * W])


def test_corruption_is_detected():
    data = bytearray(ds.encode_sample(random_sample()))
    with pytest.raises(ds.HeaderError):
        ds.decode_sample(b"XXXX" + bytes(data[4:]))
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(ds.VersionError):
        ds.decode_sample(bytes(bad))
    with pytest.raises(ds.ChecksumError) as exc:
        ds.decode_sample(bytes(data[:-1]))
    assert exc.value.section == "payload"
    n = struct.unpack_from("<I", data, 10)[0]
    bad = bytearray(data)
    bad[14] ^= 0xFF
    with pytest.raises(ds.ChecksumError) as exc:
        ds.decode_sample(bytes(bad))
    assert exc.value.section == "metadata"
    bad = bytearray(data)
    plane = 14 + n + 4 + 2 * 4 * 12 * 16 + 5
    bad[plane] ^= 0x01
    with pytest.raises(ds.ChecksumError) as exc:
        ds.decode_sample(bytes(bad))
    assert exc.value.section == "q"


def test_generation_outputs(tiny_dataset):
    cfg, out, manifest = tiny_dataset
    assert len(manifest["entries"]) + len(manifest["failures"]) == cfg.n_samples
    assert manifest["checksum"] == ds.manifest_checksum(manifest)
    loaded = ds.load_manifest(out)
    ds.verify_manifest(loaded)
    lines = (out / "trials.tsv").read_text().splitlines()
    assert lines and all(len(line.split("\t")) == 8 for line in lines)


def test_generation_is_deterministic(tiny_dataset, tmp_path):
    cfg, _, manifest = tiny_dataset
    again = ds.generate_dataset(cfg, tmp_path)
    assert again["checksum"] == manifest["checksum"]
    assert [e["sha256"] for e in again["entries"]] == [e["sha256"] for e in manifest["entries"]]


def test_different_seed_changes_data(tiny_dataset, tmp_path):
    _, _, manifest = tiny_dataset
    other = ds.generate_dataset(tiny_config(seed=1), tmp_path)
    assert other["checksum"] != manifest["checksum"]


def test_labels_and_metadata(tiny_dataset):
    cfg, out, manifest = tiny_dataset
    for e in manifest["entries"]:
        s = ds.read_sample(out / e["file"])
        assert s.metadata["object_id"] == e["object_id"]
        assert s.metadata["seed"] == e["seed"]
        qs = [g["quality"] for g in s.metadata["grasps"]]
        assert all(q >= cfg.positive_threshold for q in qs)
        ref = encode_maps([GraspRect.from_dict(g) for g in s.metadata["grasps"]], cfg.camera, cfg.gripper)
        assert np.array_equal(ref.q, s.maps.q)


def test_regenerate_single_sample(tiny_dataset):
    cfg, out, manifest = tiny_dataset
    e = manifest["entries"][-1]
    s = ds.regenerate_sample(cfg, e["object_id"], e["e_index"], int(e["id"][-3:]))
    assert ds.encode_sample(s) == (out / e["file"]).read_bytes()


def test_verify_detects_stray_and_tampered_files(tiny_dataset, tmp_path):
    cfg, out, _ = tiny_dataset
    m = ds.generate_dataset(cfg, tmp_path)
    m = ds.load_manifest(tmp_path)
    (tmp_path / "samples" / "stray.gsds").write_bytes(b"")
    with pytest.raises(ds.DatasetError, match="unreferenced"):
        ds.verify_manifest(m)
    (tmp_path / "samples" / "stray.gsds").unlink()
    f = tmp_path / m["entries"][0]["file"]
    f.write_bytes(f.read_bytes()[:-1] + b"\0")
    with pytest.raises(ds.DatasetError, match="digest"):
        ds.verify_manifest(m)


def test_no_split_leakage(tiny_dataset):
    _, _, manifest = tiny_dataset
    by_obj = {}
    for e in manifest["entries"]:
        by_obj.setdefault(e["object_id"], set()).add(e["split"])
    assert all(len(v) == 1 for v in by_obj.values())
    assert set(manifest["splits"]) == {"train", "val"}


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_properties(n_objects, f_train, seed):
    entries = [{"id": f"{o}_{a}", "object_id": o, "split": None} for o in range(n_objects) for a in range(3)]
    m = ds.split({"entries": entries}, {"train": f_train, "val": 1 - f_train}, seed)
    tags = {}
    for e in m["entries"]:
        assert tags.setdefault(e["object_id"], e["split"]) == e["split"]
    assert sorted(m["splits"]["train"] + m["splits"]["val"]) == list(range(n_objects))
    assert m["splits"]["train"] and m["splits"]["val"]
    assert ds.split({"entries": entries}, {"train": f_train, "val": 1 - f_train}, seed) == m


def test_split_needs_enough_objects():
    with pytest.raises(ds.DatasetError):
        ds.split({"entries": [{"id": "a", "object_id": 0}]}, {"train": 0.5, "val": 0.5}, 0)


def test_too_many_failures_abort(tmp_path):
    # augmentation that can never keep the object in frame fails every sample
    cfg = tiny_config()
    cfg = replace(cfg, augment=replace(cfg.augment, zoom=(30.0, 30.0), max_attempts=1), objects=cfg.objects[:1],
                  e_sweep=(2e9,))
    with pytest.raises(ds.DatasetError):
        ds.generate_dataset(cfg, tmp_path)
