"""Held-out evaluation of trained grasp networks and report emission."""
from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .dataset import E_SWEEP, TRIAL_GRIPPER, TRIAL_SCHEDULE, TRIAL_SIM, _material_defaults, derive_seed
from .fem import Material, SimConfig
from .geometry import TEST_OBJECTS, ShapeSpec, generate_shape, region_materials
from .grasp import GraspOutcome, GraspRect, GripperConfig, ShakeSchedule, label_grasps, local_width, trial_log_line
from .imaging import CameraModel, GraspMaps, SceneSample, decode_grasps, footprint, render_scene
from .net import GraspNet, input_planes

MODELS = ("stiffness", "depth-only")

# 3D benchmark averages, for context in report footers
REFERENCE = {"stiffness": 68.6, "depth-only": 38.6}

_TEST_SEED_OFFSET = 1_000_003

SVG_SCALE = 2.0
"""SVG units per percentage point of success rate."""


@dataclass
class ExperimentConfig:
    test_objects: list = field(default_factory=lambda: list(TEST_OBJECTS))
    e_sweep: tuple = E_SWEEP
    k: int = 5
    aware_model: str = ""
    baseline_model: str = ""
    camera: CameraModel = field(default_factory=CameraModel)
    gripper: GripperConfig = TRIAL_GRIPPER
    schedule: ShakeSchedule = TRIAL_SCHEDULE
    sim: SimConfig = TRIAL_SIM
    material: dict = field(default_factory=_material_defaults)
    edge_length: float = 0.007
    success_threshold: float = 1.0
    footprint_mask: bool = True
    out_dir: str = "eval"
    seed: int = 0
    training_objects: list = field(default_factory=list)

    def __post_init__(self):
        self.e_sweep = tuple(float(e) for e in self.e_sweep)
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for e in self.e_sweep:
            if not 2e4 <= e <= 2e9:
                raise ValueError(f"e_sweep: value {e:g} outside [2e4, 2e9]")
        train = {json.dumps(s.to_dict(), sort_keys=True) for s in self.training_objects}
        for s in self.test_objects:
            if json.dumps(s.to_dict(), sort_keys=True) in train:
                raise ValueError("test_objects: a test object is also a training object")

    def to_dict(self) -> dict:
        return {
            "test_objects": [s.to_dict() for s in self.test_objects],
            "e_sweep": list(self.e_sweep),
            "k": self.k,
            "aware_model": self.aware_model,
            "baseline_model": self.baseline_model,
            "camera": self.camera.to_dict(),
            "gripper": self.gripper.to_dict(),
            "schedule": self.schedule.to_dict(),
            "sim": self.sim.to_dict(),
            "material": dict(self.material),
            "edge_length": self.edge_length,
            "success_threshold": self.success_threshold,
            "footprint_mask": self.footprint_mask,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()
        kw = {}
        if "test_objects" in d:
            kw["test_objects"] = [ShapeSpec.from_dict(o) for o in d["test_objects"]]
        for key in ("e_sweep", "k", "aware_model", "baseline_model", "edge_length", "success_threshold",
                    "footprint_mask", "out_dir", "seed"):
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
        if "material" in d:
            kw["material"] = {**_material_defaults(), **d["material"]}
        return replace(base, **kw) if kw else base


def test_mesh(cfg: ExperimentConfig, index: int):
    spec = cfg.test_objects[index]
    mesh = generate_shape(spec, cfg.edge_length, derive_seed(cfg.seed, _TEST_SEED_OFFSET + index))
    return mesh.translated(-mesh.centroid())


def test_materials(cfg: ExperimentConfig, index: int, E: float) -> dict:
    spec = cfg.test_objects[index]
    return {r: Material(float(e), **cfg.material) for r, e in region_materials(spec, E).items()}


def scene_sample(cfg: ExperimentConfig, mesh, materials) -> SceneSample:
    image = render_scene(mesh, materials, cfg.camera)
    return SceneSample(image, GraspMaps.zeros(cfg.camera.shape), {"camera": cfg.camera.to_dict()})


def predict_grasps(net: GraspNet, sample: SceneSample, cfg: ExperimentConfig) -> list[GraspRect]:
    """Top-k decoded grasps for one rendered scene.

    With ``footprint_mask`` set, Q is zeroed off the observed object: every
    label center lies inside the body, so peaks on empty background (the
    network's zero-padding artifacts in the image corners) are never grasps.
    """
    x = input_planes([sample], net.config)
    out = net.predict(x)[0]
    if cfg.footprint_mask:
        out[0] = out[0] * footprint(sample.image, cfg.camera)
    return decode_grasps(GraspMaps.from_stack(out), cfg.camera, cfg.gripper, cfg.k)


def evaluate(cfg: ExperimentConfig, models: dict, jobs: int = 1, progress=None) -> dict:
    """Run every (object, E, model) cell and return the report dict.

    ``models`` maps a model name to a GraspNet. Both models see identical
    scenes and decoding parameters.
    """
    trials = []
    for i in range(len(cfg.test_objects)):
        mesh = test_mesh(cfg, i)
        for E in cfg.e_sweep:
            materials = test_materials(cfg, i, E)
            sample = scene_sample(cfg, mesh, materials)
            for name, net in models.items():
                grasps = predict_grasps(net, sample, cfg)
                outcomes = []
                if grasps:
                    _, outcomes = label_grasps(mesh, materials, grasps, cfg.gripper, cfg.schedule, cfg.sim,
                                               jobs=jobs, return_outcomes=True)
                for rank, (g, o) in enumerate(zip(grasps, outcomes)):
                    width0 = local_width(mesh, g, cfg.gripper)
                    trials.append({
                        "object": i, "E": E, "model": name, "rank": rank, "grasp": g.to_dict(),
                        "metric": o.metric, "failure_stage": o.failure_stage, "max_slip": o.max_slip,
                        "final_jaw_separation": o.final_jaw_separation, "object_width": width0,
                        "success": bool(o.metric >= cfg.success_threshold),
                    })
                if progress:
                    progress(i, E, name)
    return build_report(cfg, list(models), trials)


def build_report(cfg: ExperimentConfig, model_names, trials) -> dict:
    """Aggregate per-trial records into cells, per-model means and pinch statistics."""
    n_obj = len(cfg.test_objects)
    cells = []
    for i in range(n_obj):
        for E in cfg.e_sweep:
            for m in model_names:
                ts = [t for t in trials if t["object"] == i and t["E"] == E and t["model"] == m]
                cells.append({"object": i, "E": E, "model": m, "successes": sum(t["success"] for t in ts),
                              "attempts": cfg.k, "decoded": len(ts)})
    aggregates, degradation, pinch = {}, {}, {}
    for m in model_names:
        mc = [c for c in cells if c["model"] == m]
        aggregates[m] = {
            "successes": sum(c["successes"] for c in mc),
            "attempts": sum(c["attempts"] for c in mc),
            "success_rate": _rate(mc),
        }
        degradation[m] = {_ekey(E): _rate([c for c in mc if c["E"] == E]) for E in cfg.e_sweep}
        pinch[m] = {}
        for E in cfg.e_sweep:
            ratios = [t["final_jaw_separation"] / t["object_width"] for t in trials
                      if t["model"] == m and t["E"] == E and t["success"] and t["object_width"] > 0]
            pinch[m][_ekey(E)] = {"mean_ratio": float(np.mean(ratios)) if ratios else None, "count": len(ratios)}
    return {
        "config": cfg.to_dict(),
        "models": list(model_names),
        "trials": trials,
        "cells": cells,
        "aggregates": aggregates,
        "degradation": degradation,
        "pinch": pinch,
        "reference": {"success_rate_percent": REFERENCE,
                      "note": "3D benchmark rates for context; the planar analog targets ordering and gap direction, not the numbers"},
    }


def _rate(cells) -> float:
    att = sum(c["attempts"] for c in cells)
    return sum(c["successes"] for c in cells) / att if att else 0.0


def _ekey(E: float) -> str:
    return f"{E:.0e}".replace("+0", "").replace("+", "")


def relative_drop(report: dict, model: str, e_high: float = 2e7, e_low: float = 2e4) -> float:
    """Success drop from ``e_high`` to ``e_low`` relative to the ``e_high`` rate."""
    deg = report["degradation"][model]
    hi, lo = deg[_ekey(e_high)], deg[_ekey(e_low)]
    return (hi - lo) / hi if hi > 0 else 0.0


def absolute_drop(report: dict, model: str, e_high: float = 2e7, e_low: float = 2e4) -> float:
    deg = report["degradation"][model]
    return deg[_ekey(e_high)] - deg[_ekey(e_low)]


def check_report(report: dict) -> None:
    """Recompute aggregates from the trials; raise on any disagreement."""
    cfg = report["config"]
    fresh = build_report(ExperimentConfig.from_dict(cfg), report["models"], report["trials"])
    for key in ("cells", "aggregates", "degradation", "pinch"):
        if fresh[key] != report[key]:
            raise ValueError(f"report {key} do not match the trial records")


# --------------------------------------------------------------------------
# output files


def write_report(report: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "trials": out / "trials.tsv"}
    paths["json"].write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(paths["csv"], "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["object", "E", "model", "successes", "attempts", "success_rate"])
        for c in report["cells"]:
            wr.writerow([c["object"], f"{c['E']:g}", c["model"], c["successes"], c["attempts"],
                         f"{c['successes'] / c['attempts']:.4f}"])
    lines = []
    for t in report["trials"]:
        o = GraspOutcome(t["metric"], t["max_slip"], 0, 0, t["failure_stage"], t["final_jaw_separation"])
        lines.append(f"{t['model']}\t" + trial_log_line(t["object"], t["E"], GraspRect.from_dict(t["grasp"]), o))
    paths["trials"].write_text("".join(line + "\n" for line in lines))
    return paths


def degradation_table(report: dict) -> str:
    es = report["config"]["e_sweep"]
    head = "model".ljust(12) + "".join(f"{_ekey(E):>10}" for E in es) + f"{'mean':>10}"
    rows = [head]
    for m in report["models"]:
        deg = report["degradation"][m]
        rows.append(m.ljust(12) + "".join(f"{100 * deg[_ekey(E)]:9.1f}%" for E in es)
                    + f"{100 * report['aggregates'][m]['success_rate']:9.1f}%")
    ref = report["reference"]["success_rate_percent"]
    rows.append("")
    rows.append("reference rates (3D benchmark): " + ", ".join(f"{k} {v:.1f}%" for k, v in ref.items()))
    return "\n".join(rows) + "\n"


def pinch_table(report: dict) -> str:
    es = report["config"]["e_sweep"]
    rows = ["final jaw separation / undeformed width, successful grasps",
            "model".ljust(12) + "".join(f"{_ekey(E):>14}" for E in es)]
    for m in report["models"]:
        cells = []
        for E in es:
            p = report["pinch"][m][_ekey(E)]
            cells.append(f"{'-':>14}" if p["mean_ratio"] is None else f"{p['mean_ratio']:8.3f} (n={p['count']:2d})")
        rows.append(m.ljust(12) + "".join(cells))
    return "\n".join(rows) + "\n"


_E_COLORS = ("#c6dbef", "#6baed6", "#2171b5", "#08306b")


def render_svg(report: dict | None) -> str:
    """Grouped stacked bars: one stack per (object, model), one segment per E.

    Each segment is the success rate at that E divided by the number of E
    levels, so a full stack reads as the mean success rate (percent).
    """
    scale = SVG_SCALE
    left, top, plot_h = 60, 30, 100 * scale
    bar_w, gap, group_gap = 18, 4, 22
    models = report["models"] if report else []
    es = report["config"]["e_sweep"] if report else []
    n_obj = len(report["config"]["test_objects"]) if report else 0
    group_w = len(models) * (bar_w + gap) + group_gap
    width = left + max(n_obj, 1) * group_w + 160
    height = top + plot_h + 60
    base = top + plot_h
    el = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<defs><pattern id="stripes" width="6" height="6" patternUnits="userSpaceOnUse" '
        'patternTransform="rotate(45)"><rect width="6" height="6" fill="white" fill-opacity="0"/>'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="white" stroke-width="2"/></pattern></defs>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{base}" x2="{width - 150}" y2="{base}" stroke="black"/>',
    ]
    for p in range(0, 101, 20):
        y = base - p * scale
        el.append(f'<line x1="{left - 4}" y1="{y:.3f}" x2="{left}" y2="{y:.3f}" stroke="black"/>')
        el.append(f'<text x="{left - 8}" y="{y + 4:.3f}" font-size="10" text-anchor="end">{p}</text>')
    el.append(f'<text x="14" y="{top + plot_h / 2}" font-size="11" transform="rotate(-90 14 {top + plot_h / 2})" '
              'text-anchor="middle">success rate (%)</text>')
    cells = {(c["object"], c["E"], c["model"]): c for c in report["cells"]} if report else {}
    for i in range(n_obj):
        gx = left + 10 + i * group_w
        for j, m in enumerate(models):
            x = gx + j * (bar_w + gap)
            y = base
            el.append(f'<g class="stack" data-object="{i}" data-model="{escape(m)}">')
            for ei, E in enumerate(es):
                c = cells[(i, E, m)]
                pct = 100.0 * c["successes"] / c["attempts"] / len(es)
                h = pct * scale
                y -= h
                color = _E_COLORS[ei % len(_E_COLORS)]
                el.append(f'<rect class="segment" x="{x}" y="{y:.4f}" width="{bar_w}" height="{h:.4f}" '
                          f'fill="{color}" data-e="{E:g}" data-value="{pct:.6f}"/>')
                if j % 2 == 1 and h > 0:
                    el.append(f'<rect x="{x}" y="{y:.4f}" width="{bar_w}" height="{h:.4f}" fill="url(#stripes)"/>')
            el.append("</g>")
        el.append(f'<text x="{gx + len(models) * (bar_w + gap) / 2:.1f}" y="{base + 16}" font-size="11" '
                  f'text-anchor="middle">{i + 1}</text>')
    lx = width - 140
    for ei, E in enumerate(es):
        el.append(f'<rect x="{lx}" y="{top + 16 * ei}" width="12" height="12" fill="{_E_COLORS[ei % 4]}"/>')
        el.append(f'<text x="{lx + 18}" y="{top + 16 * ei + 10}" font-size="10">E = {E:.0e} Pa</text>')
    for j, m in enumerate(models):
        el.append(f'<text x="{lx}" y="{top + 16 * (len(es) + j) + 14}" font-size="10">'
                  f'{"striped" if j % 2 else "plain"}: {escape(m)}</text>')
    el.append(f'<text x="{left}" y="{height - 12}" font-size="10">object</text>')
    el.append("</svg>")
    return "\n".join(el) + "\n"


def write_report_files(report: dict | None, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"svg": out / "success.svg"}
    paths["svg"].write_text(render_svg(report))
    if report:
        paths["degradation"] = out / "degradation.txt"
        paths["degradation"].write_text(degradation_table(report))
        paths["pinch"] = out / "pinch.txt"
        paths["pinch"].write_text(pinch_table(report))
    return paths


def parse_svg_segments(svg: str) -> list[dict]:
    """Read back the stacked-bar segments of an emitted chart."""
    root = ET.fromstring(svg)
    ns = {"s": "http://www.w3.org/2000/svg"}
    out = []
    for g in root.iter("{http://www.w3.org/2000/svg}g"):
        if g.get("class") != "stack":
            continue
        for r in g.findall("s:rect", ns):
            if r.get("class") == "segment":
                out.append({"object": int(g.get("data-object")), "model": g.get("data-model"),
                            "E": float(r.get("data-e")), "height": float(r.get("height")),
                            "value": float(r.get("data-value"))})
    return out

