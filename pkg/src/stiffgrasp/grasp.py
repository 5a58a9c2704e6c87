"""Antipodal grasp sampling, collision filtering and shake-test labelling.

The gripper is a planar parallel jaw: two capsules perpendicular to the
grasp axis. Grasp width is the gap between the jaw surfaces.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import (
    FEMError,
    RigidObstacle,
    SimConfig,
    Simulation,
    SoftBodyState,
    precompute_elements,
)
from .geometry import PlanarMesh, signed_distance

log = logging.getLogger(__name__)

SLIP_LIMIT = 0.005
CLEARANCE = 0.005


class SamplingError(RuntimeError):
    """Too few antipodal pairs on a shape."""


@dataclass(frozen=True)
class GraspRect:
    center: tuple[float, float]
    angle: float
    width: float
    quality: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "angle", normalize_angle(self.angle))
        if not self.width > 0:
            raise ValueError("grasp width must be > 0")

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    def with_quality(self, q: float) -> "GraspRect":
        return replace(self, quality=float(q))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "angle": self.angle, "width": self.width, "quality": self.quality}

    @classmethod
    def from_dict(cls, d) -> "GraspRect":
        return cls(tuple(d["center"]), d["angle"], d["width"], d.get("quality", 0.0))


def normalize_angle(theta: float) -> float:
    """Map an axis direction into [0, pi)."""
    t = math.fmod(float(theta), math.pi)
    if t < 0:
        t += math.pi
    if t >= math.pi:
        t -= math.pi
    return t


@dataclass(frozen=True)
class GripperConfig:
    max_opening: float = 0.08
    jaw_length: float = 0.02
    jaw_radius: float = 0.0025
    closing_speed: float = 0.05
    force_limit: float = 20.0
    width_floor: float = 0.002

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"gripper {k} must be > 0")
        if self.width_floor >= self.max_opening:
            raise ValueError("width_floor must be below max_opening")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ShakeSchedule:
    levels: tuple[float, ...] = (2.0, 5.0, 10.0, 20.0)
    cycles: int = 2
    frequency: float = 2.0

    def __post_init__(self):
        lv = tuple(float(a) for a in self.levels)
        object.__setattr__(self, "levels", lv)
        if any(a <= 0 for a in lv):
            raise ValueError("shake levels must be positive")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("shake levels must be strictly increasing")
        if self.cycles < 1 or not self.frequency > 0:
            raise ValueError("cycles and frequency must be positive")

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "cycles": self.cycles, "frequency": self.frequency}


@dataclass
class GraspOutcome:
    metric: float
    max_slip: float
    levels_survived: int
    total_levels: int
    failure_stage: str  # "close", "shake-level-<k>" or "none"
    final_jaw_separation: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# --------------------------------------------------------------------------
# sampling


def _boundary_geometry(mesh: PlanarMesh):
    poly = mesh.boundary_polygon()
    nxt = np.roll(poly, -1, axis=0)
    edge = nxt - poly
    length = np.linalg.norm(edge, axis=1)
    n_edge = np.column_stack([edge[:, 1], -edge[:, 0]]) / length[:, None]
    return poly, nxt, edge, length, n_edge


def _ray_exits(origin, direction, poly, nxt):
    """Parameters t > 0 and edge ids where the ray crosses the boundary."""
    e = nxt - poly
    # solve origin + t d = poly + s e
    den = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    w = poly - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / den
        s = (w[:, 0] * direction[1] - w[:, 1] * direction[0]) / den
    ok = (np.abs(den) > 1e-15) & (t > 1e-9) & (s >= 0) & (s <= 1)
    idx = np.where(ok)[0]
    order = np.argsort(t[idx], kind="stable")
    return t[idx][order], idx[order]


def is_antipodal(p1, n1, p2, n2, half_angle: float) -> bool:
    """Line p1->p2 within ``half_angle`` of -n1, and p2->p1 within it of -n2."""
    d = np.asarray(p2, float) - np.asarray(p1, float)
    L = np.linalg.norm(d)
    if L <= 0:
        return False
    d = d / L
    c = math.cos(half_angle)
    return float(np.dot(d, -np.asarray(n1))) >= c - 1e-12 and float(np.dot(-d, -np.asarray(n2))) >= c - 1e-12


def sample_antipodal(mesh: PlanarMesh, friction_half_angle: float = math.atan(0.6), n_target: int = 200,
                     seed: int = 0, clearance: float = CLEARANCE, max_attempts: int | None = None):
    """Antipodal grasp candidates from boundary point pairs.

    Contact points are drawn uniformly along the boundary (edge interiors),
    rays are cast inside the friction cone about the inward normal, and the
    first exit point is accepted when its own cone contains the reverse ray.
    Near-duplicates (center within 2 mm and axis within 5 degrees) collapse.

    Returns a list of GraspRect (quality 0), at most ``n_target`` long, and
    attaches the contact pairs as ``sample_antipodal.last_pairs`` for
    inspection.
    """
    if n_target <= 0:
        raise ValueError("n_target must be > 0")
    rng = np.random.default_rng(seed)
    poly, nxt, edge, length, n_edge = _boundary_geometry(mesh)
    cum = np.concatenate([[0], np.cumsum(length)])
    total = cum[-1]
    attempts = max_attempts or 40 * n_target
    out, pairs = [], []
    n_valid = 0
    for _ in range(attempts):
        if len(out) >= n_target:
            break
        s = rng.uniform(0, total)
        i = min(int(np.searchsorted(cum, s, side="right") - 1), len(poly) - 1)
        frac = (s - cum[i]) / length[i]
        frac = min(max(frac, 0.02), 0.98)
        p1 = poly[i] + frac * edge[i]
        n1 = n_edge[i]
        phi = rng.uniform(-friction_half_angle, friction_half_angle)
        c, sn = math.cos(phi), math.sin(phi)
        d = -np.array([c * n1[0] - sn * n1[1], sn * n1[0] + c * n1[1]])
        ts, ids = _ray_exits(p1 + 1e-9 * d, d, poly, nxt)
        if len(ts) == 0:
            continue
        j = ids[0]
        p2 = p1 + ts[0] * d
        if not is_antipodal(p1, n1, p2, n_edge[j], friction_half_angle):
            continue
        n_valid += 1
        center = 0.5 * (p1 + p2)
        theta = normalize_angle(math.atan2(d[1], d[0]))
        width = float(np.linalg.norm(p2 - p1)) + 2 * clearance
        dup = False
        for g in out:
            da = abs(theta - g.angle)
            da = min(da, math.pi - da)
            if np.hypot(center[0] - g.center[0], center[1] - g.center[1]) < 0.002 and da < math.radians(5):
                dup = True
                break
        if dup:
            continue
        out.append(GraspRect((float(center[0]), float(center[1])), theta, width))
        pairs.append((p1.copy(), n1.copy(), p2.copy(), n_edge[j].copy()))
    if n_valid < 5:
        raise SamplingError(f"only {n_valid} antipodal pairs found")
    sample_antipodal.last_pairs = pairs
    return out


# --------------------------------------------------------------------------
# jaws


def jaw_obstacles(grasp: GraspRect, separation: float, gripper: GripperConfig, offset=(0.0, 0.0),
                  closing_velocity: float = 0.0, frame_velocity=(0.0, 0.0)):
    """Two jaw capsules with surface gap ``separation``.

    ``closing_velocity`` is the rate at which the gap shrinks; each jaw moves
    at half of it towards the center.
    """
    u = grasp.axis
    t = np.array([-u[1], u[0]])
    c = np.asarray(grasp.center, float) + np.asarray(offset, float)
    half = 0.5 * separation + gripper.jaw_radius
    hl = 0.5 * gripper.jaw_length
    fv = np.asarray(frame_velocity, float)
    jaws = []
    for sign in (-1.0, 1.0):
        mid = c + sign * half * u
        vel = fv - sign * 0.5 * closing_velocity * u
        jaws.append(RigidObstacle(tuple(mid - hl * t), tuple(mid + hl * t), gripper.jaw_radius, tuple(vel)))
    return jaws


def jaw_sample_points(grasp: GraspRect, separation: float, gripper: GripperConfig, step: float = 0.001):
    pts = []
    for jaw in jaw_obstacles(grasp, separation, gripper):
        a, b = np.array(jaw.a), np.array(jaw.b)
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        pts.append(a + np.linspace(0, 1, n + 1)[:, None] * (b - a))
    return np.vstack(pts)


def filter_collisions(candidates, mesh: PlanarMesh, gripper: GripperConfig):
    """Keep candidates whose pre-grasp jaws clear the body everywhere."""
    kept = []
    for g in candidates:
        if g.width > gripper.max_opening:
            continue
        pts = jaw_sample_points(g, g.width, gripper)
        sd = signed_distance(mesh, pts)
        if np.all(sd > gripper.jaw_radius):
            kept.append(g)
    return kept


# --------------------------------------------------------------------------
# execution


@dataclass
class CloseResult:
    sim: Simulation
    grasp: GraspRect
    separation: float
    jaw_forces: np.ndarray
    failure_stage: str | None
    reason: str = ""
    frames: list = field(default_factory=list)


def local_width(mesh: PlanarMesh, grasp: GraspRect, gripper: GripperConfig, positions=None) -> float:
    """Extent of the body along the grasp axis within the jaw footprint."""
    x = mesh.vertices if positions is None else positions
    u = grasp.axis
    t = np.array([-u[1], u[0]])
    rel = x - np.asarray(grasp.center)
    lat = rel @ t
    band = np.abs(lat) <= 0.5 * gripper.jaw_length + gripper.jaw_radius
    if not band.any():
        return 0.0
    proj = rel[band] @ u
    return float(proj.max() - proj.min())


def _inverted_fraction(sim):
    return sim.inverted_fraction()


def execute_close(mesh: PlanarMesh, materials, grasp: GraspRect, gripper: GripperConfig, sim_cfg: SimConfig,
                  state: SoftBodyState | None = None, record: bool = False,
                  settle_time: float = 0.3, max_inverted: float = 0.05) -> CloseResult:
    """Close the jaws on the body and let it settle.

    Returns a CloseResult whose ``failure_stage`` is None on success.
    """
    if state is None:
        state = precompute_elements(mesh, materials)
    sim = Simulation(state.copy(), sim_cfg)
    dt = sim_cfg.dt
    sep = float(grasp.width)
    frames = []
    # spawn check: jaws must start clear of the body
    sd = signed_distance(mesh, jaw_sample_points(grasp, sep, gripper), positions=sim.state.x)
    if np.any(sd <= 0):
        return CloseResult(sim, grasp, sep, np.zeros(2), "close", "jaws spawn inside body", frames)
    forces = np.zeros(2)
    max_frames = int(math.ceil((sep - gripper.width_floor) / (gripper.closing_speed * dt))) + 1
    try:
        for _ in range(max_frames):
            step_close = min(gripper.closing_speed * dt, sep - gripper.width_floor)
            vel = step_close / dt
            jaws = jaw_obstacles(grasp, sep, gripper, closing_velocity=vel)
            per = sim.advance(jaws)
            sep -= step_close
            forces = per[:, 0]
            if record:
                frames.append(sim.state.x.copy())
            if forces.min() >= gripper.force_limit or sep <= gripper.width_floor + 1e-12:
                break
        # hold
        jaws = jaw_obstacles(grasp, sep, gripper)
        n_settle = int(math.ceil(settle_time / dt))
        for k in range(n_settle):
            per = sim.advance(jaws)
            forces = per[:, 0]
            if record:
                frames.append(sim.state.x.copy())
            if k > 5 and sim.max_speed() < 1e-4:
                break
    except FEMError as exc:
        return CloseResult(sim, grasp, sep, forces, "close", f"simulation error: {exc}", frames)
    if _inverted_fraction(sim) > max_inverted:
        return CloseResult(sim, grasp, sep, forces, "close", "element inversion", frames)
    if forces.min() < 0.1:
        return CloseResult(sim, grasp, sep, forces, "close", "no contact", frames)
    return CloseResult(sim, grasp, sep, forces, None, "", frames)


def shake_test(closed: CloseResult, schedule: ShakeSchedule, gripper: GripperConfig,
               record: bool = False, max_inverted: float = 0.05) -> GraspOutcome:
    """Shake the closed grasp through the schedule; stop at the first failed level.

    Within each level the cycles alternate between the grasp axis and its
    perpendicular. Displacement per cycle is A(1 - cos wt) so every cycle
    starts and ends at rest relative to the hold pose.
    """
    total = len(schedule.levels)
    if closed.failure_stage is not None:
        return GraspOutcome(0.0, 0.0, 0, total, "close", closed.separation)
    if total == 0:
        return GraspOutcome(1.0, 0.0, 0, 0, "none", closed.separation)
    sim = closed.sim
    g = closed.grasp
    cfg = sim.cfg
    dt = cfg.dt
    u = g.axis
    t_ax = np.array([-u[1], u[0]])
    omega = 2 * math.pi * schedule.frequency
    period = 1.0 / schedule.frequency
    n_cycle = max(8, int(round(period / dt)))
    h = period / n_cycle
    half_gap = 0.5 * closed.separation + gripper.jaw_radius
    c0 = sim.centroid() - np.asarray(g.center)
    max_slip = 0.0
    survived = 0
    for k, acc in enumerate(schedule.levels):
        amp = acc / omega**2
        level_slip = 0.0
        ok = True
        for cyc in range(schedule.cycles):
            direction = u if cyc % 2 == 0 else t_ax
            for i in range(n_cycle):
                t0, t1 = i * h, (i + 1) * h
                d0 = amp * (1 - math.cos(omega * t0))
                d1 = amp * (1 - math.cos(omega * t1))
                vel = (d1 - d0) / h * direction
                jaws = jaw_obstacles(g, closed.separation, gripper, offset=d0 * direction, frame_velocity=vel)
                try:
                    sim.advance(jaws, dt=h)
                except FEMError:
                    return GraspOutcome(survived / total, max(max_slip, level_slip), survived, total,
                                        f"shake-level-{k}", closed.separation)
                rel = sim.centroid() - (np.asarray(g.center) + d1 * direction)
                slip = float(np.linalg.norm(rel - c0))
                level_slip = max(level_slip, slip)
                if slip >= SLIP_LIMIT or abs(rel @ u) >= half_gap:
                    ok = False
                    break
            if not ok:
                break
        if ok and sim.inverted_fraction() > max_inverted:
            ok = False
        max_slip = max(max_slip, level_slip)
        if not ok:
            return GraspOutcome(survived / total, max_slip, survived, total, f"shake-level-{k}", closed.separation)
        survived += 1
    return GraspOutcome(1.0, max_slip, survived, total, "none", closed.separation)


def run_trial(mesh, materials, grasp, gripper, schedule, sim_cfg, state=None) -> GraspOutcome:
    """execute_close followed by shake_test; never raises for physics failures."""
    try:
        closed = execute_close(mesh, materials, grasp, gripper, sim_cfg, state=state)
        return shake_test(closed, schedule, gripper)
    except FEMError as exc:
        log.debug("trial failed: %s", exc)
        return GraspOutcome(0.0, 0.0, 0, len(schedule.levels), "close", grasp.width)


def _trial_worker(args):
    mesh, materials, grasp, gripper, schedule, sim_cfg = args
    return run_trial(mesh, materials, grasp, gripper, schedule, sim_cfg)


def label_grasps(mesh, materials, candidates, gripper, schedule, sim_cfg, jobs: int = 1,
                 return_outcomes: bool = False):
    """Run every candidate through close + shake; quality = shake metric.

    Trials are independent; results come back in candidate order.
    """
    candidates = list(candidates)
    if jobs > 1 and len(candidates) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            outcomes = list(ex.map(_trial_worker, [(mesh, materials, g, gripper, schedule, sim_cfg) for g in candidates]))
    else:
        state = precompute_elements(mesh, materials)
        outcomes = [run_trial(mesh, materials, g, gripper, schedule, sim_cfg, state=state) for g in candidates]
    labelled = [g.with_quality(o.metric) for g, o in zip(candidates, outcomes)]
    if return_outcomes:
        return labelled, outcomes
    return labelled


def trial_log_line(object_id, E, grasp: GraspRect, outcome: GraspOutcome) -> str:
    """Tab-separated trial record."""
    return "\t".join([
        str(object_id), f"{E:.6g}", f"{grasp.center[0]:.6f}", f"{grasp.center[1]:.6f}",
        f"{grasp.angle:.6f}", f"{grasp.width:.6f}", f"{outcome.metric:.4f}", outcome.failure_stage,
    ])


def parse_trial_log_line(line: str) -> dict:
    f = line.rstrip("\n").split("\t")
    return {
        "object_id": f[0], "E": float(f[1]), "center": (float(f[2]), float(f[3])), "angle": float(f[4]),
        "width": float(f[5]), "metric": float(f[6]), "failure_stage": f[7],
    }

