"""Command-line entry point: ``stiffgrasp gen|train|eval|report|replay``.

Configuration files are JSON objects with optional ``dataset``, ``train``,
``net`` and ``experiment`` sections; any field left out keeps its default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import experiment as ex
from .fem import dump_frames
from .grasp import GraspRect, execute_close, shake_test
from .net import GraspNet, NetConfig, TrainConfig, TrainingDivergence, WeightsError, input_planes, load_weights
from .net import save_weights, target_planes, train, write_metrics_csv

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("stiffgrasp")


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def dataset_config(args, conf: dict) -> ds.DatasetConfig:
    section = dict(conf.get("dataset", {}))
    preset = section.pop("preset", None) or getattr(args, "preset", None) or "desk"
    if preset not in ds.PRESETS:
        raise ConfigError(f"dataset.preset: unknown preset {preset!r}")
    seed = args.seed if args.seed is not None else int(section.get("master_seed", 0))
    cfg = ds.PRESETS[preset](seed)
    merged = {**cfg.to_dict(), **section, "master_seed": seed}
    if "objects" not in section:
        merged["objects"] = [s.to_dict() for s in ds.training_objects(len(cfg.objects), seed)]
    try:
        return ds.DatasetConfig.from_dict(merged)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config(args, conf: dict) -> TrainConfig:
    section = dict(conf.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        section["epochs"] = args.epochs
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        return TrainConfig(**{**TrainConfig().to_dict(), **section})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def net_config(conf: dict, variant: str) -> NetConfig:
    section = dict(conf.get("net", {}))
    section["input_channels"] = 2 if variant == "stiffness" else 1
    try:
        return NetConfig.from_dict({**NetConfig().to_dict(), **section})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"net: {exc}") from exc


def experiment_config(args, conf: dict) -> ex.ExperimentConfig:
    section = dict(conf.get("experiment", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        return ex.ExperimentConfig.from_dict(section)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def cmd_gen(args, conf) -> int:
    cfg = dataset_config(args, conf)
    out = Path(args.out or "dataset")
    t0 = time.time()

    def progress(done, total):
        log.info("scene %d/%d", done, total)

    manifest = ds.generate_dataset(cfg, out, jobs=args.jobs, progress=progress)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"{len(manifest['entries'])} samples ({len(cfg.objects)} objects x {len(cfg.e_sweep)} E x "
          f"{cfg.augmentations} augmentations), {len(manifest['failures'])} failed, "
          f"objects per split {counts}, {time.time() - t0:.0f} s")
    print(f"manifest: {out / 'manifest.json'}  checksum {manifest['checksum']}")
    return EXIT_OK


def load_training_data(manifest, net_cfg: NetConfig):
    xs, ys = {}, {}
    for name in ("train", "val"):
        samples = ds.load_split(manifest, name) if name in manifest.get("splits", {}) else []
        xs[name] = input_planes(samples, net_cfg) if samples else np.zeros((0, net_cfg.input_channels, 1, 1))
        ys[name] = target_planes(samples) if samples else np.zeros((0, 4, 1, 1))
    return xs, ys


def cmd_train(args, conf) -> int:
    if not args.manifest:
        raise ConfigError("train: --manifest is required")
    manifest = ds.load_manifest(args.manifest)
    net_cfg = net_config(conf, args.variant)
    tcfg = train_config(args, conf)
    out = Path(args.out or "models")
    out.mkdir(parents=True, exist_ok=True)
    xs, ys = load_training_data(manifest, net_cfg)
    if len(xs["train"]) == 0:
        raise ConfigError("train: manifest has no training samples")
    net = GraspNet(net_cfg, seed=tcfg.seed)
    weights = out / f"{args.variant}.gsnw"
    checkpoint = out / f"{args.variant}.last-good.gsnw"

    def progress(row):
        log.info("epoch %d train %.5f val %.5f", row["epoch"], row["train_loss"], row["val_loss"])

    try:
        result = train(net, xs["train"], ys["train"], xs["val"], ys["val"], tcfg, checkpoint=checkpoint,
                       progress=progress)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; last good weights at {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    save_weights(weights, result.net)
    write_metrics_csv(out / f"{args.variant}_metrics.csv", result.history)
    print(f"{args.variant}: best epoch {result.best_epoch}, val loss {result.history[result.best_epoch]['val_loss']:.5f}")
    print(f"weights: {weights}")
    return EXIT_OK


def cmd_eval(args, conf) -> int:
    cfg = experiment_config(args, conf)
    aware = args.aware or cfg.aware_model
    base = args.baseline or cfg.baseline_model
    try:
        models = {"stiffness": load_weights(aware, net_config(conf, "stiffness")),
                  "depth-only": load_weights(base, net_config(conf, "depth-only"))}
    except (OSError, WeightsError) as exc:
        print(f"cannot load model weights: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg = replace(cfg, aware_model=str(aware), baseline_model=str(base))
    report = ex.evaluate(cfg, models, jobs=args.jobs)
    out = Path(args.out or cfg.out_dir)
    try:
        paths = ex.write_report(report, out)
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    print(ex.degradation_table(report), end="")
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_report(args, conf) -> int:
    try:
        report = json.loads(Path(args.report).read_text()) if args.report else None
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read report: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out or "report")
    paths = ex.write_report_files(report, out)
    if report:
        print(ex.degradation_table(report), end="")
        print(ex.pinch_table(report), end="")
    print(f"chart: {paths['svg']}")
    return EXIT_OK


def cmd_replay(args, conf) -> int:
    cfg = experiment_config(args, conf)
    if args.report:
        report = json.loads(Path(args.report).read_text())
        t = report["trials"][args.trial]
        index, E, grasp = t["object"], t["E"], GraspRect.from_dict(t["grasp"])
    else:
        if args.grasp is None:
            raise ConfigError("replay: give --report/--trial or --grasp cx,cy,theta,width")
        cx, cy, th, w = (float(v) for v in args.grasp.split(","))
        index, E, grasp = args.object, args.E, GraspRect((cx, cy), th, w)
    if not 0 <= index < len(cfg.test_objects):
        raise ConfigError(f"replay: object index {index} out of range")
    mesh = ex.test_mesh(cfg, index)
    materials = ex.test_materials(cfg, index, E)
    closed = execute_close(mesh, materials, grasp, cfg.gripper, cfg.sim, record=True)
    outcome = shake_test(closed, cfg.schedule, cfg.gripper)
    out = Path(args.out or "replay")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trial_o{index}_E{E:.0e}.frames"
    frames = closed.frames or [closed.sim.state.x]
    dump_frames(path, frames, mesh=mesh)
    print(f"metric {outcome.metric:.2f} ({outcome.failure_stage}), final separation "
          f"{outcome.final_jaw_separation * 1000:.2f} mm, {len(frames)} frames -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stiffgrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a labelled dataset")
    g.add_argument("--preset", choices=sorted(ds.PRESETS), default=None)
    t = sub.add_parser("train", parents=[common], help="train one network variant")
    t.add_argument("--manifest", help="dataset directory or manifest.json")
    t.add_argument("--variant", choices=("stiffness", "depth-only"), default="stiffness")
    t.add_argument("--epochs", type=int, default=None)
    e = sub.add_parser("eval", parents=[common], help="evaluate both variants on held-out objects")
    e.add_argument("--aware", help="stiffness-aware weights (.gsnw)")
    e.add_argument("--baseline", help="depth-only weights (.gsnw)")
    r = sub.add_parser("report", parents=[common], help="emit SVG chart and text tables")
    r.add_argument("--report", help="report.json from eval (omit for an empty chart)")
    rp = sub.add_parser("replay", parents=[common], help="dump the frames of one grasp trial")
    rp.add_argument("--report", help="report.json to take a trial from")
    rp.add_argument("--trial", type=int, default=0, help="trial index in the report")
    rp.add_argument("--object", type=int, default=0, help="held-out object index")
    rp.add_argument("--E", type=float, default=2e9, help="Young's modulus (Pa)")
    rp.add_argument("--grasp", help="cx,cy,theta,width in meters/radians")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report, "replay": cmd_replay}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        conf = _load_config(args.config)
        return COMMANDS[args.command](args, conf)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.DatasetError, ds.SampleFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
