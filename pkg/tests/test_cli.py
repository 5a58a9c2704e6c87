import json

import pytest

from stiffgrasp import cli
from stiffgrasp import dataset as ds
from stiffgrasp import experiment as ex
from stiffgrasp.fem import load_frames
from stiffgrasp.geometry import LIBRARY, TEST_OBJECTS
from stiffgrasp.net import load_weights

TINY = {
    "dataset": {"objects": [LIBRARY[11].to_dict(), LIBRARY[1].to_dict()], "e_sweep": [2e5, 2e9],
                "augmentations": 1, "n_candidates": 20, "max_labeled": 4,
                "split_fractions": {"train": 0.5, "val": 0.5}},
    "train": {"epochs": 2, "batch_size": 2},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["gen", "--config", str(d / "tiny.json"), "--out", str(d / "data")]) == cli.EXIT_OK
    return d


def run(workdir, *argv):
    return cli.main([argv[0], "--config", str(workdir / "tiny.json"), *argv[1:]])


def test_gen_writes_manifest(workdir, capsys):
    m = ds.load_manifest(workdir / "data")
    assert len(m["entries"]) == 4
    ds.verify_manifest(m)


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"e_sweep": [1e3]}}))
    assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert "e_sweep" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["report", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("variant,channels", [("stiffness", 2), ("depth-only", 1)])
def test_train_writes_variant_weights(workdir, variant, channels):
    out = workdir / f"m_{variant}"
    assert run(workdir, "train", "--manifest", str(workdir / "data"), "--variant", variant,
               "--out", str(out)) == cli.EXIT_OK
    net = load_weights(out / f"{variant}.gsnw")
    assert net.config.input_channels == channels
    rows = (out / f"{variant}_metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 3


def test_train_same_seed_same_bytes(workdir):
    paths = []
    for tag in ("a", "b"):
        out = workdir / f"seed_{tag}"
        assert run(workdir, "train", "--manifest", str(workdir / "data"), "--seed", "7", "--epochs", "1",
                   "--out", str(out)) == cli.EXIT_OK
        paths.append(out / "stiffness.gsnw")
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_divergence_exits_3(workdir, capsys):
    conf = dict(TINY, train={"epochs": 2, "divergence_limit": 1e-9})
    (workdir / "div.json").write_text(json.dumps(conf))
    out = workdir / "div"
    code = cli.main(["train", "--config", str(workdir / "div.json"), "--manifest", str(workdir / "data"),
                     "--out", str(out)])
    assert code == cli.EXIT_DIVERGED
    assert "last good weights" in capsys.readouterr().err
    assert load_weights(out / "stiffness.last-good.gsnw").config.input_channels == 2


def test_train_without_manifest_exits_2(workdir):
    assert run(workdir, "train") == cli.EXIT_CONFIG


def test_missing_dataset_exits_1(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "nothing")]) == cli.EXIT_FAILED


def test_eval_missing_weights_exits_4(tmp_path):
    code = cli.main(["eval", "--aware", str(tmp_path / "a.gsnw"), "--baseline", str(tmp_path / "b.gsnw"),
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_IO


def test_eval_wrong_variant_exits_4(workdir, tmp_path, capsys):
    s = workdir / "m_stiffness" / "stiffness.gsnw"
    code = cli.main(["eval", "--aware", str(s), "--baseline", str(s), "--out", str(tmp_path)])
    assert code == cli.EXIT_IO
    assert "input_channels" in capsys.readouterr().err


def test_eval_and_report(workdir, tmp_path, capsys):
    conf = {"experiment": {"test_objects": [TEST_OBJECTS[3].to_dict()], "e_sweep": [2e9], "k": 1}}
    (tmp_path / "e.json").write_text(json.dumps(conf))
    code = cli.main(["eval", "--config", str(tmp_path / "e.json"),
                     "--aware", str(workdir / "m_stiffness" / "stiffness.gsnw"),
                     "--baseline", str(workdir / "m_depth-only" / "depth-only.gsnw"),
                     "--out", str(tmp_path / "ev")])
    assert code == cli.EXIT_OK
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    ex.check_report(report)
    assert cli.main(["report", "--report", str(tmp_path / "ev" / "report.json"),
                     "--out", str(tmp_path / "rep")]) == cli.EXIT_OK
    segs = ex.parse_svg_segments((tmp_path / "rep" / "success.svg").read_text())
    assert len(segs) == 2


def test_report_without_input_draws_axes(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == cli.EXIT_OK
    assert 'class="axis"' in (tmp_path / "success.svg").read_text()


def test_report_missing_file_exits_4(tmp_path):
    assert cli.main(["report", "--report", str(tmp_path / "none.json")]) == cli.EXIT_IO


def test_replay_dumps_frames(tmp_path, capsys):
    code = cli.main(["replay", "--object", "3", "--E", "2e9", "--grasp", "0,0,1.5707963,0.036",
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    meta, frames = load_frames(tmp_path / "trial_o3_E2e+09.frames")
    assert frames.shape[0] > 1 and frames.shape[1] == int(meta["vertices"])
    assert "metric" in capsys.readouterr().out


def test_replay_needs_a_grasp():
    assert cli.main(["replay"]) == cli.EXIT_CONFIG
