"""Planar co-rotational linear FEM with penalty contact and Coulomb friction.

Constant-strain triangles under plane strain, lumped mass, rotations
extracted per element by 2D polar decomposition and lagged over each
implicit substep. Objects are extruded, so stiffness and mass both carry the
extrusion height and forces come out in newtons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .geometry import PlanarMesh


class FEMError(RuntimeError):
    pass


class SimulationError(FEMError):
    """CG failed to reach the requested residual within the iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Material:
    young_modulus: float
    poisson_ratio: float = 0.3
    density: float = 1000.0
    rayleigh_alpha: float = 1.0
    rayleigh_beta: float = 1e-3

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ValueError("young_modulus must be > 0")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must be in [0, 0.5)")
        if not self.density > 0:
            raise ValueError("density must be > 0")
        if self.rayleigh_alpha < 0 or self.rayleigh_beta < 0:
            raise ValueError("Rayleigh coefficients must be >= 0")
        mu, lam = self.lame
        if not (math.isfinite(mu) and math.isfinite(lam) and mu > 0 and lam >= 0):
            raise ValueError("Lame parameters must be finite and positive")

    @property
    def lame(self) -> tuple[float, float]:
        E, nu = self.young_modulus, self.poisson_ratio
        return E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu))

    def to_dict(self) -> dict:
        return {
            "young_modulus": self.young_modulus,
            "poisson_ratio": self.poisson_ratio,
            "density": self.density,
            "rayleigh_alpha": self.rayleigh_alpha,
            "rayleigh_beta": self.rayleigh_beta,
        }


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    substeps: int = 4
    cg_tol: float = 1e-6
    cg_max_iter: int = 500
    contact_stiffness: float = 2e4
    contact_damping: float = 5.0
    friction_mu: float = 0.6
    gravity: tuple[float, float] = (0.0, 0.0)
    slip_speed: float = 1e-4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if not 0 < self.cg_tol < 1:
            raise ValueError("cg_tol must be in (0, 1)")
        if not self.contact_stiffness > 0:
            raise ValueError("contact_stiffness must be > 0")
        if self.friction_mu < 0:
            raise ValueError("friction_mu must be >= 0")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["gravity"] = list(self.gravity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "gravity" in d:
            d["gravity"] = tuple(d["gravity"])
        return cls(**d)


@dataclass(frozen=True)
class RigidObstacle:
    """Kinematic capsule: segment ``a``-``b`` swept by ``radius``."""

    a: tuple[float, float]
    b: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be > 0")

    def moved(self, dt: float) -> "RigidObstacle":
        vx, vy = self.velocity
        return replace(
            self,
            a=(self.a[0] + vx * dt, self.a[1] + vy * dt),
            b=(self.b[0] + vx * dt, self.b[1] + vy * dt),
        )


def _caps_arrays(obstacles):
    caps = np.zeros((len(obstacles), 5))
    vel = np.zeros((len(obstacles), 2))
    for k, o in enumerate(obstacles):
        caps[k] = (o.a[0], o.a[1], o.b[0], o.b[1], o.radius)
        vel[k] = o.velocity
    return caps, vel


@dataclass
class SoftBodyState:
    x: np.ndarray
    v: np.ndarray
    X: np.ndarray
    triangles: np.ndarray
    Dm_inv: np.ndarray
    rest_area: np.ndarray
    Ke: np.ndarray
    mass: np.ndarray
    beta_e: np.ndarray
    alpha_v: np.ndarray
    R: np.ndarray
    fixed: np.ndarray  # per-dof pin flags
    inverted: np.ndarray
    time: float = 0.0
    # CSR pattern of the 2n x 2n system (shared, never mutated)
    pattern: dict = field(default_factory=dict, repr=False)

    def copy(self) -> "SoftBodyState":
        return replace(
            self,
            x=self.x.copy(),
            v=self.v.copy(),
            R=self.R.copy(),
            inverted=self.inverted.copy(),
            fixed=self.fixed.copy(),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.x)

    def pin(self, vertices) -> None:
        for i in np.atleast_1d(vertices):
            self.fixed[2 * i] = self.fixed[2 * i + 1] = True


def plane_strain_matrix(E: float, nu: float) -> np.ndarray:
    c = E / ((1 + nu) * (1 - 2 * nu))
    return c * np.array([[1 - nu, nu, 0.0], [nu, 1 - nu, 0.0], [0.0, 0.0, (1 - 2 * nu) / 2]])


def strain_operator(Dm_inv: np.ndarray) -> np.ndarray:
    """Linear-triangle strain-displacement matrices B, shape (m, 3, 6)."""
    g1 = Dm_inv[:, 0, :]
    g2 = Dm_inv[:, 1, :]
    g0 = -(g1 + g2)
    grads = (g0, g1, g2)
    B = np.zeros((len(Dm_inv), 3, 6))
    for a, g in enumerate(grads):
        B[:, 0, 2 * a] = g[:, 0]
        B[:, 1, 2 * a + 1] = g[:, 1]
        B[:, 2, 2 * a] = g[:, 1]
        B[:, 2, 2 * a + 1] = g[:, 0]
    return B


def _csr_pattern(n: int, tris: np.ndarray) -> dict:
    rows = {}
    for t in tris:
        for a in t:
            for b in t:
                for r in range(2):
                    for s in range(2):
                        rows.setdefault(2 * a + r, set()).add(2 * b + s)
    for i in range(2 * n):
        rows.setdefault(i, set()).update({i, i ^ 1})
    indptr = np.zeros(2 * n + 1, np.int64)
    cols = []
    for i in range(2 * n):
        c = sorted(rows[i])
        cols.append(c)
        indptr[i + 1] = indptr[i] + len(c)
    indices = np.fromiter((c for row in cols for c in row), np.int64, indptr[-1])
    lookup = {}
    for i in range(2 * n):
        for k in range(indptr[i], indptr[i + 1]):
            lookup[(i, indices[k])] = k
    elem_map = np.zeros((len(tris), 6, 6), np.int64)
    for e, t in enumerate(tris):
        for a in range(3):
            for b in range(3):
                for r in range(2):
                    for s in range(2):
                        elem_map[e, 2 * a + r, 2 * b + s] = lookup[(2 * t[a] + r, 2 * t[b] + s)]
    diag_map = np.array([lookup[(i, i)] for i in range(2 * n)], np.int64)
    return {"indptr": indptr, "indices": indices, "elem_map": elem_map, "diag_map": diag_map}


def precompute_elements(mesh: PlanarMesh, materials) -> SoftBodyState:
    """Rest-shape data, element stiffness and lumped mass.

    ``materials`` maps region id -> Material (a single Material is applied to
    every region).
    """
    if isinstance(materials, Material):
        materials = {r: materials for r in np.unique(mesh.triangle_region)}
    X = np.asarray(mesh.vertices, dtype=float)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    for r in np.unique(mesh.triangle_region):
        if int(r) not in materials:
            raise FEMError(f"no material for region {int(r)}")
    Dm = np.stack([X[tris[:, 1]] - X[tris[:, 0]], X[tris[:, 2]] - X[tris[:, 0]]], axis=2)
    det = Dm[:, 0, 0] * Dm[:, 1, 1] - Dm[:, 0, 1] * Dm[:, 1, 0]
    area = 0.5 * det
    scale = max(np.ptp(X, axis=0).max(), 1e-300) ** 2
    if np.any(np.abs(area) <= 1e-14 * scale):
        raise FEMError("degenerate (zero-area) triangle")
    if np.any(area < 0):
        raise FEMError("clockwise triangle in mesh")
    Dm_inv = np.linalg.inv(Dm)
    B = strain_operator(Dm_inv)
    t = mesh.height
    m = len(tris)
    Ke = np.zeros((m, 6, 6))
    beta_e = np.zeros(m)
    mass = np.zeros(len(X))
    alpha_acc = np.zeros(len(X))
    for r in np.unique(mesh.triangle_region):
        mat = materials[int(r)]
        sel = mesh.triangle_region == r
        C = plane_strain_matrix(mat.young_modulus, mat.poisson_ratio)
        Ke[sel] = t * area[sel, None, None] * np.einsum("eki,kl,elj->eij", B[sel], C, B[sel])
        beta_e[sel] = mat.rayleigh_beta
        me = mat.density * t * area[sel] / 3.0
        for a in range(3):
            np.add.at(mass, tris[sel, a], me)
            np.add.at(alpha_acc, tris[sel, a], me * mat.rayleigh_alpha)
    Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))
    alpha_v = alpha_acc / mass
    R = np.tile(np.eye(2), (m, 1, 1))
    return SoftBodyState(
        x=X.copy(),
        v=np.zeros_like(X),
        X=X.copy(),
        triangles=tris,
        Dm_inv=Dm_inv,
        rest_area=area,
        Ke=Ke,
        mass=mass,
        beta_e=beta_e,
        alpha_v=alpha_v,
        R=R,
        fixed=np.zeros(2 * len(X), np.bool_),
        inverted=np.zeros(m, np.bool_),
        pattern=_csr_pattern(len(X), tris),
    )


def polar_rotation(F, previous=None):
    """Rotation factor of a 2x2 deformation gradient.

    Returns ``(R, inverted)``. When det(F) <= 0 the previous rotation (or the
    identity) is returned with ``inverted=True``.
    """
    F = np.asarray(F, dtype=float)
    c, s, ok = K.polar2(F[0, 0], F[0, 1], F[1, 0], F[1, 1])
    if not ok:
        R = np.eye(2) if previous is None else np.asarray(previous, float).copy()
        return R, True
    return np.array([[c, -s], [s, c]]), False


def deformation_gradients(state: SoftBodyState) -> np.ndarray:
    x, t = state.x, state.triangles
    Ds = np.stack([x[t[:, 1]] - x[t[:, 0]], x[t[:, 2]] - x[t[:, 0]]], axis=2)
    return Ds @ state.Dm_inv


def update_rotations(state: SoftBodyState) -> np.ndarray:
    """Refresh ``state.R`` from the current positions; returns inversion flags."""
    inv = K.element_rotations(state.x, state.triangles, state.Dm_inv, state.R)
    state.inverted = inv
    return inv


def _local_displacements(state: SoftBodyState) -> np.ndarray:
    """u_e = R_e^T x_e - X_e, shape (m, 6)."""
    t = state.triangles
    xe = state.x[t] - state.x[t[:, :1]]  # (m, 3, 2), relative to vertex 0
    Xe = state.X[t] - state.X[t[:, :1]]
    # row-vector form: (R^T x)^T = x^T R
    local = np.einsum("mai,mij->maj", xe, state.R)
    return (local - Xe).reshape(len(t), 6)


def elastic_forces(state: SoftBodyState, update=True):
    """Co-rotational elastic nodal forces.

    Returns ``(forces (n, 2), R (m, 2, 2), inverted (m,))``. With
    ``update=False`` the cached rotations are used as-is.
    """
    if update:
        update_rotations(state)
    u = _local_displacements(state)
    fl = -np.einsum("mij,mj->mi", state.Ke, u).reshape(-1, 3, 2)
    fw = np.einsum("mij,maj->mai", state.R, fl)
    out = np.zeros_like(state.x)
    for a in range(3):
        np.add.at(out, state.triangles[:, a], fw[:, a])
    return out, state.R.copy(), state.inverted.copy()


def elastic_energy(state: SoftBodyState, update=True) -> float:
    if update:
        update_rotations(state)
    u = _local_displacements(state)
    return float(0.5 * np.einsum("mi,mij,mj->", u, state.Ke, u))


def kinetic_energy(state: SoftBodyState) -> float:
    return float(0.5 * np.sum(state.mass[:, None] * state.v**2))


def total_energy(state: SoftBodyState) -> float:
    """Kinetic plus co-rotational elastic energy (joules)."""
    return kinetic_energy(state) + elastic_energy(state)


def contact_forces(state: SoftBodyState, obstacles, cfg: SimConfig):
    """Penalty normal force plus regularised Coulomb friction per vertex.

    Returns ``(forces (n, 2), per_obstacle (k, 3))`` where each obstacle row
    is [total normal force, fx, fy] exerted on the body.
    """
    caps, vel = _caps_arrays(obstacles)
    n = state.n_vertices
    force = np.zeros((n, 2))
    jx = np.zeros((n, 2, 2))
    jv = np.zeros((n, 2, 2))
    active = np.zeros(n, np.bool_)
    per = np.zeros((len(obstacles), 3))
    K.contact_kernel(state.x, state.v, caps, vel, cfg.contact_stiffness, cfg.contact_damping,
                     cfg.friction_mu, cfg.slip_speed, force, jx, jv, active, per)
    return force, per


class Simulation:
    """Owns a body state and advances it frame by frame (in place)."""

    def __init__(self, state: SoftBodyState, cfg: SimConfig):
        self.state = state
        self.cfg = cfg
        self.last_contact = np.zeros((0, 3))
        self.last_residual = 0.0
        self.last_iterations = 0

    def advance(self, obstacles=(), dt=None) -> np.ndarray:
        """Advance one frame of ``dt`` split into ``cfg.substeps`` substeps.

        Obstacles start at their given pose and move with their velocity.
        Returns the frame-averaged contact force per obstacle.
        """
        cfg = self.cfg
        s = self.state
        dt = cfg.dt if dt is None else dt
        h = dt / cfg.substeps
        caps, vel = _caps_arrays(obstacles)
        per = np.zeros((len(obstacles), 3))
        acc = np.zeros((len(obstacles), 3))
        p = s.pattern
        n_inv = 0
        for k in range(cfg.substeps):
            it, res, n_inv = K.substep_kernel(
                s.x, s.v, s.X, s.triangles, s.Ke, s.beta_e, s.mass, s.alpha_v, s.Dm_inv, s.R, s.fixed,
                caps, vel, cfg.contact_stiffness, cfg.contact_damping, cfg.friction_mu, cfg.slip_speed,
                cfg.gravity[0], cfg.gravity[1], h,
                p["indptr"], p["indices"], p["elem_map"], p["diag_map"], cfg.cg_tol, cfg.cg_max_iter, per,
            )
            self.last_residual = res
            self.last_iterations = it
            if res > cfg.cg_tol:
                raise SimulationError(f"CG did not converge: residual {res:.3e} after {it} iterations", res)
            acc += per
            caps[:, 0] += vel[:, 0] * h
            caps[:, 1] += vel[:, 1] * h
            caps[:, 2] += vel[:, 0] * h
            caps[:, 3] += vel[:, 1] * h
            s.time += h
        s.inverted = np.zeros(len(s.triangles), np.bool_)
        if n_inv:
            F = deformation_gradients(s)
            s.inverted = np.linalg.det(F) <= 0
        self.last_contact = acc / cfg.substeps
        return self.last_contact

    def inverted_fraction(self) -> float:
        F = deformation_gradients(self.state)
        return float(np.mean(np.linalg.det(F) <= 0))

    def centroid(self) -> np.ndarray:
        m = self.state.mass
        return (self.state.x * m[:, None]).sum(axis=0) / m.sum()

    def max_speed(self) -> float:
        return float(np.sqrt((self.state.v**2).sum(axis=1)).max())


def step(state: SoftBodyState, obstacles=(), cfg: SimConfig | None = None) -> SoftBodyState:
    """Advance a copy of ``state`` by one frame; the input is left untouched."""
    cfg = cfg or SimConfig()
    sim = Simulation(state.copy(), cfg)
    sim.advance(obstacles)
    return sim.state


def momentum(state: SoftBodyState) -> np.ndarray:
    return (state.mass[:, None] * state.v).sum(axis=0)


# --------------------------------------------------------------------------
# frame dumps


def dump_frames(path, frames, mesh: PlanarMesh | None = None, times=None) -> None:
    """Write positions per frame: a text header then little-endian float32.

    Header lines (ASCII) end with a line ``end_header``; the payload is
    ``frames x vertices x 2`` float32 values.
    """
    frames = np.asarray(frames, dtype="<f4")
    nf, nv = frames.shape[:2]
    header = ["stiffgrasp-frames 1", f"frames {nf}", f"vertices {nv}", "dtype float32-le"]
    if times is not None:
        header.append("times " + " ".join(f"{t:.6g}" for t in times))
    if mesh is not None:
        header.append(f"triangles {len(mesh.triangles)}")
        header.append("tri " + " ".join(str(int(i)) for i in np.asarray(mesh.triangles).ravel()))
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(frames.tobytes())


def load_frames(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    meta = {}
    for line in raw[:end].decode("ascii").splitlines()[:-1]:
        key, _, val = line.partition(" ")
        meta[key] = val
    nf, nv = int(meta["frames"]), int(meta["vertices"])
    data = np.frombuffer(raw[end:], dtype="<f4")
    if data.size != nf * nv * 2:
        raise FEMError("frame payload size mismatch")
    return meta, data.reshape(nf, nv, 2)

