"""Procedural planar shapes, triangulation and boundary queries.

Objects are extruded 2D shapes: the simulator and the grasp sampler only ever
see the top-down footprint plus a constant extrusion height.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import Delaunay
from shapely.geometry import Point, Polygon

SHAPE_KINDS = (
    "disk",
    "box",
    "rounded-box",
    "ellipse",
    "capsule",
    "L-shape",
    "T-shape",
    "annulus-sector",
    "star",
    "composite",
)

_REQUIRED = {
    "disk": ("radius",),
    "box": ("width", "height"),
    "rounded-box": ("width", "height", "corner_radius"),
    "ellipse": ("a", "b"),
    "capsule": ("length", "radius"),
    "L-shape": ("width", "height", "thickness"),
    "T-shape": ("width", "height", "thickness"),
    "annulus-sector": ("inner_radius", "outer_radius", "span"),
    "star": ("outer_radius", "inner_radius", "points"),
    "composite": (),
}


class GeometryError(ValueError):
    """Raised for infeasible shape specifications or failed meshing."""


@dataclass(frozen=True)
class Part:
    """One material region of a composite shape."""

    spec: "ShapeSpec"
    offset: tuple[float, float] = (0.0, 0.0)
    region: int = 0


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    params: dict = field(default_factory=dict)
    parts: tuple[Part, ...] = ()
    height: float = 0.05

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "params": dict(self.params), "height": self.height}
        if self.parts:
            d["parts"] = [
                {"spec": p.spec.to_dict(), "offset": list(p.offset), "region": p.region}
                for p in self.parts
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        parts = tuple(
            Part(cls.from_dict(p["spec"]), tuple(p["offset"]), int(p["region"]))
            for p in d.get("parts", ())
        )
        return cls(d["kind"], dict(d.get("params", {})), parts, float(d.get("height", 0.05)))

    @property
    def regions(self) -> list[int]:
        if self.kind == "composite":
            return sorted({p.region for p in self.parts})
        return [0]


@dataclass
class PlanarMesh:
    """Triangulated footprint of an extruded object.

    Attributes
    ----------
    vertices : (n, 2) float64 array, meters
    triangles : (m, 3) int array, counterclockwise
    boundary : (b,) int array, counterclockwise boundary loop (not repeated)
    vertex_region : (n,) int array
    triangle_region : (m,) int array
    height : extrusion height, meters
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    vertex_region: np.ndarray
    triangle_region: np.ndarray
    height: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangle_areas(self, positions=None) -> np.ndarray:
        x = self.vertices if positions is None else positions
        a, b, c = (x[self.triangles[:, i]] for i in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def boundary_polygon(self, positions=None) -> np.ndarray:
        x = self.vertices if positions is None else positions
        return x[self.boundary]

    def centroid(self) -> np.ndarray:
        areas = self.triangle_areas()
        cent = self.vertices[self.triangles].mean(axis=1)
        return (cent * areas[:, None]).sum(axis=0) / areas.sum()

    def translated(self, offset) -> "PlanarMesh":
        return PlanarMesh(
            self.vertices + np.asarray(offset, dtype=float),
            self.triangles.copy(),
            self.boundary.copy(),
            self.vertex_region.copy(),
            self.triangle_region.copy(),
            self.height,
        )

    def rotated(self, angle: float, about=(0.0, 0.0)) -> "PlanarMesh":
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        about = np.asarray(about, dtype=float)
        v = (self.vertices - about) @ rot.T + about
        return PlanarMesh(v, self.triangles.copy(), self.boundary.copy(),
                          self.vertex_region.copy(), self.triangle_region.copy(), self.height)

    def to_obj(self) -> str:
        """Wavefront-style text dump (1-based faces)."""
        lines = [f"v {x:.9g} {y:.9g} 0" for x, y in self.vertices]
        lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in self.triangles]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# shape outlines


def _arc(cx, cy, r, a0, a1, h):
    n = max(2, int(math.ceil(abs(a1 - a0) * r / h)))
    t = np.linspace(a0, a1, n + 1)
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


def _validate(spec: ShapeSpec):
    if spec.kind not in SHAPE_KINDS:
        raise GeometryError(f"unknown shape kind {spec.kind!r}")
    for key in _REQUIRED[spec.kind]:
        if key not in spec.params:
            raise GeometryError(f"{spec.kind}: missing parameter {key!r}")
        if not spec.params[key] > 0:
            raise GeometryError(f"{spec.kind}: parameter {key!r} must be > 0")
    if not spec.height > 0:
        raise GeometryError("extrusion height must be > 0")
    p = spec.params
    if spec.kind == "rounded-box" and 2 * p["corner_radius"] >= min(p["width"], p["height"]):
        raise GeometryError("rounded-box: corner radius too large")
    if spec.kind in ("L-shape", "T-shape") and p["thickness"] >= min(p["width"], p["height"]):
        raise GeometryError(f"{spec.kind}: thickness must be below width and height")
    if spec.kind == "annulus-sector":
        if p["inner_radius"] >= p["outer_radius"]:
            raise GeometryError("annulus-sector: inner radius must be below outer radius")
        if p["span"] >= 2 * math.pi:
            raise GeometryError("annulus-sector: span must be below 2*pi")
    if spec.kind == "star":
        if p["inner_radius"] >= p["outer_radius"]:
            raise GeometryError("star: inner radius must be below outer radius")
        if int(p["points"]) < 3:
            raise GeometryError("star: needs at least 3 points")
    if spec.kind == "composite":
        if len(spec.parts) < 2:
            raise GeometryError("composite: needs at least two parts")
        for part in spec.parts:
            if part.spec.kind == "composite":
                raise GeometryError("composite: nested composites are not supported")
            _validate(part.spec)


def _outline(spec: ShapeSpec, h: float) -> np.ndarray:
    """Counterclockwise outline of a primitive, vertices spaced at most ``h``."""
    p = spec.params
    k = spec.kind
    if k == "disk":
        pts = _arc(0, 0, p["radius"], 0, 2 * math.pi, h)[:-1]
    elif k == "ellipse":
        a, b = p["a"], p["b"]
        # uniform in arc length so that no chord exceeds h
        tf = np.linspace(0, 2 * math.pi, 4097)
        xy = np.column_stack([a * np.cos(tf), b * np.sin(tf)])
        arc = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
        n = max(8, int(math.ceil(arc[-1] / h)))
        t = np.interp(np.arange(n) * arc[-1] / n, arc, tf)
        pts = np.column_stack([a * np.cos(t), b * np.sin(t)])
    elif k == "box":
        w, hh = p["width"] / 2, p["height"] / 2
        pts = np.array([[-w, -hh], [w, -hh], [w, hh], [-w, hh]])
    elif k == "rounded-box":
        w, hh, r = p["width"] / 2, p["height"] / 2, p["corner_radius"]
        pts = np.vstack([
            _arc(w - r, -hh + r, r, -math.pi / 2, 0, h),
            _arc(w - r, hh - r, r, 0, math.pi / 2, h),
            _arc(-w + r, hh - r, r, math.pi / 2, math.pi, h),
            _arc(-w + r, -hh + r, r, math.pi, 1.5 * math.pi, h),
        ])
    elif k == "capsule":
        L, r = p["length"] / 2, p["radius"]
        pts = np.vstack([
            _arc(L, 0, r, -math.pi / 2, math.pi / 2, h),
            _arc(-L, 0, r, math.pi / 2, 1.5 * math.pi, h),
        ])
    elif k == "L-shape":
        w, hh, t = p["width"], p["height"], p["thickness"]
        pts = np.array([[0, 0], [w, 0], [w, t], [t, t], [t, hh], [0, hh]], dtype=float)
    elif k == "T-shape":
        w, hh, t = p["width"], p["height"], p["thickness"]
        pts = np.array([
            [-t / 2, 0], [t / 2, 0], [t / 2, hh - t], [w / 2, hh - t],
            [w / 2, hh], [-w / 2, hh], [-w / 2, hh - t], [-t / 2, hh - t],
        ], dtype=float)
    elif k == "annulus-sector":
        ri, ro, span = p["inner_radius"], p["outer_radius"], p["span"]
        pts = np.vstack([
            _arc(0, 0, ro, -span / 2, span / 2, h),
            _arc(0, 0, ri, span / 2, -span / 2, h),
        ])
    elif k == "star":
        n = int(p["points"])
        ang = np.arange(2 * n) * math.pi / n + math.pi / 2
        rad = np.where(np.arange(2 * n) % 2 == 0, p["outer_radius"], p["inner_radius"])
        pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    else:
        raise GeometryError(f"no outline for {k!r}")
    pts = _dedupe_ring(pts)
    if _signed_area(pts) < 0:
        pts = pts[::-1]
    return pts


def _dedupe_ring(pts):
    keep = [0]
    for i in range(1, len(pts)):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-12:
            keep.append(i)
    pts = pts[keep]
    if np.linalg.norm(pts[0] - pts[-1]) <= 1e-12:
        pts = pts[:-1]
    return pts


def _signed_area(pts) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def min_feature_size(spec: ShapeSpec) -> float:
    """Smallest characteristic length of a shape (meters)."""
    p = spec.params
    k = spec.kind
    if k == "disk":
        return p["radius"]
    if k in ("box",):
        return min(p["width"], p["height"])
    if k == "rounded-box":
        return min(p["width"], p["height"], 2 * p["corner_radius"])
    if k == "ellipse":
        return min(p["a"], p["b"])
    if k == "capsule":
        return p["radius"]
    if k in ("L-shape", "T-shape"):
        return p["thickness"]
    if k == "annulus-sector":
        return p["outer_radius"] - p["inner_radius"]
    if k == "star":
        n = int(p["points"])
        # width of a star arm halfway along it
        return 2 * p["inner_radius"] * math.sin(math.pi / n)
    if k == "composite":
        return min(min_feature_size(q.spec) for q in spec.parts)
    raise GeometryError(f"unknown kind {k!r}")


def shape_polygon(spec: ShapeSpec, h: float) -> Polygon:
    """Exact-ish outline polygon of ``spec`` (composites are unioned)."""
    _validate(spec)
    if spec.kind != "composite":
        return Polygon(_outline(spec, h))
    polys = [shapely.affinity.translate(Polygon(_outline(q.spec, h)), *q.offset) for q in spec.parts]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if polys[i].intersection(polys[j]).area > 1e-12:
                raise GeometryError(f"composite: parts {i} and {j} overlap")
    union = shapely.union_all(polys).buffer(0)
    if union.geom_type != "Polygon":
        raise GeometryError("composite: parts do not form one connected region")
    if len(union.interiors):
        raise GeometryError("composite: union has holes")
    return shapely.simplify(union, 1e-12)


def analytic_area(spec: ShapeSpec) -> float:
    """Closed-form area of the ideal (curved) shape."""
    p = spec.params
    k = spec.kind
    if k == "disk":
        return math.pi * p["radius"] ** 2
    if k == "box":
        return p["width"] * p["height"]
    if k == "rounded-box":
        r = p["corner_radius"]
        return p["width"] * p["height"] - (4 - math.pi) * r * r
    if k == "ellipse":
        return math.pi * p["a"] * p["b"]
    if k == "capsule":
        return p["length"] * 2 * p["radius"] + math.pi * p["radius"] ** 2
    if k == "L-shape":
        t = p["thickness"]
        return p["width"] * t + (p["height"] - t) * t
    if k == "T-shape":
        t = p["thickness"]
        return p["width"] * t + (p["height"] - t) * t
    if k == "annulus-sector":
        return 0.5 * p["span"] * (p["outer_radius"] ** 2 - p["inner_radius"] ** 2)
    if k == "star":
        n = int(p["points"])
        return n * p["outer_radius"] * p["inner_radius"] * math.sin(math.pi / n)
    if k == "composite":
        return sum(analytic_area(q.spec) for q in spec.parts)
    raise GeometryError(f"unknown kind {k!r}")


# --------------------------------------------------------------------------
# meshing


def _resample_ring(ring: np.ndarray, h: float) -> np.ndarray:
    """Split every segment of a closed ring so that no piece exceeds ``h``."""
    out = []
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        k = max(1, int(math.ceil(np.linalg.norm(b - a) / h - 1e-9)))
        t = np.arange(k)[:, None] / k
        out.append(a + t * (b - a))
    return np.vstack(out)


def triangle_quality(pts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Inradius / circumradius ratio per triangle (0.5 for equilateral)."""
    a = np.linalg.norm(pts[tris[:, 1]] - pts[tris[:, 2]], axis=1)
    b = np.linalg.norm(pts[tris[:, 2]] - pts[tris[:, 0]], axis=1)
    c = np.linalg.norm(pts[tris[:, 0]] - pts[tris[:, 1]], axis=1)
    s = 0.5 * (a + b + c)
    area = np.sqrt(np.maximum(s * (s - a) * (s - b) * (s - c), 0.0))
    inr = area / s
    circ = a * b * c / np.maximum(4 * area, 1e-300)
    return inr / circ


def _edge_set(tris):
    e = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    return {tuple(x) for x in e}


def _triangulate(points, poly, constraint_segments):
    """Delaunay of ``points`` clipped to ``poly``, plus the constraint
    segments that did not come out as edges."""
    tri = Delaunay(points)
    simp = tri.simplices
    cent = points[simp].mean(axis=1)
    inside = shapely.contains_xy(poly, cent[:, 0], cent[:, 1])
    p0, p1, p2 = (points[simp[:, i]] for i in range(3))
    twice_area = np.abs((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    scale = np.max(np.ptp(points, axis=0)) ** 2
    simp = simp[inside & (twice_area > 1e-10 * scale)]
    edges = _edge_set(simp)
    missing = [s for s in constraint_segments if tuple(sorted(s)) not in edges]
    return simp, missing


def generate_shape(spec: ShapeSpec, target_edge_length: float, seed: int = 0) -> PlanarMesh:
    """Triangulate ``spec`` with roughly uniform edge length.

    Boundary (and composite interface) points are fixed; interior points come
    from a hexagonal lattice whose phase and orientation are drawn from
    ``seed``, relaxed by a few Laplacian sweeps. Missing boundary edges are
    recovered by midpoint insertion until the triangulation conforms.
    """
    _validate(spec)
    h = float(target_edge_length)
    if not h > 0:
        raise GeometryError("target_edge_length must be > 0")
    if h >= min_feature_size(spec):
        raise GeometryError(
            f"target_edge_length {h:g} not below minimum feature size {min_feature_size(spec):g}"
        )
    poly = shape_polygon(spec, h)
    worst = 0.0
    for attempt in range(16):
        rng = np.random.default_rng([seed, attempt])
        mesh = _mesh_attempt(spec, poly, h, rng)
        if mesh is None:
            continue
        q = triangle_quality(mesh.vertices, mesh.triangles).min()
        if q >= 0.2:
            return mesh
        worst = max(worst, q)
    raise GeometryError(f"mesh quality {worst:.3f} below 0.2 after retries")


def _mesh_attempt(spec, poly, h, rng):
    ring = np.asarray(poly.exterior.coords)[:-1]
    if _signed_area(ring) < 0:
        ring = ring[::-1]
    ring = _resample_ring(ring, h)

    # interface polylines between composite parts
    iface = np.zeros((0, 2))
    iface_segments_pts = []
    if spec.kind == "composite":
        shrunk = poly.buffer(-0.3 * h)
        for q in spec.parts:
            pr = np.asarray(shapely.affinity.translate(Polygon(_outline(q.spec, h)), *q.offset).exterior.coords)[:-1]
            pr = _resample_ring(pr, h)
            keep = shapely.contains_xy(shrunk, pr[:, 0], pr[:, 1])
            iface_segments_pts.append(pr[keep])
        if iface_segments_pts:
            iface = np.vstack(iface_segments_pts)
            if len(iface):
                iface = np.unique(np.round(iface, 12), axis=0)
                # shared edges are resampled once per part; merge near-duplicates
                kept = []
                for p in iface:
                    if all(np.hypot(*(p - k)) > 0.4 * h for k in kept):
                        kept.append(p)
                iface = np.array(kept)

    fixed = np.vstack([ring, iface]) if len(iface) else ring
    nb = len(ring)

    # hex lattice interior
    ang = rng.uniform(0, math.pi / 3)
    off = rng.uniform(0, 1, size=2) * h
    minx, miny, maxx, maxy = poly.bounds
    R = math.hypot(maxx - minx, maxy - miny)
    cx, cy = (minx + maxx) / 2, (miny + maxy) / 2
    ny = int(math.ceil(R / (h * math.sqrt(3) / 2))) + 2
    nx = int(math.ceil(R / h)) + 2
    jj, ii = np.meshgrid(np.arange(-ny, ny + 1), np.arange(-nx, nx + 1), indexing="ij")
    lx = (ii + 0.5 * (jj % 2)) * h + off[0]
    ly = jj * h * math.sqrt(3) / 2 + off[1]
    c, s = math.cos(ang), math.sin(ang)
    lat = np.column_stack([cx + c * lx.ravel() - s * ly.ravel(), cy + s * lx.ravel() + c * ly.ravel()])
    inner = poly.buffer(-0.55 * h)
    lat = lat[shapely.contains_xy(inner, lat[:, 0], lat[:, 1])]
    if len(iface):
        d = np.min(np.linalg.norm(lat[:, None, :] - iface[None, :, :], axis=2), axis=1)
        lat = lat[d > 0.55 * h]

    points = np.vstack([fixed, lat])
    n_fixed = len(fixed)
    for _ in range(3):
        points = _relax(points, n_fixed, poly, h)
    ring, iface, lat = points[:nb], points[nb:n_fixed], points[n_fixed:]

    for _ in range(50):
        points = np.vstack([ring, iface, lat])
        constraint = [(i, (i + 1) % nb) for i in range(nb)]
        simp, missing = _triangulate(points, poly, constraint)
        if not missing:
            break
        miss = {a if (b - a) % nb == 1 else b for a, b in missing}
        new_ring = []
        for i in range(nb):
            new_ring.append(ring[i])
            if i in miss:
                new_ring.append(0.5 * (ring[i] + ring[(i + 1) % nb]))
        ring = np.array(new_ring)
        nb = len(ring)
    else:
        return None

    # drop unreferenced vertices, keep boundary first
    used = np.zeros(len(points), bool)
    used[simp.ravel()] = True
    used[:nb] = True
    remap = -np.ones(len(points), int)
    remap[used] = np.arange(used.sum())
    pts = points[used]
    tris = remap[simp]
    # orientation
    a, b, c_ = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    sa = (b[:, 0] - a[:, 0]) * (c_[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c_[:, 0] - a[:, 0])
    tris[sa < 0] = tris[sa < 0][:, [0, 2, 1]]
    tris = tris.astype(np.int64)
    boundary = np.arange(nb, dtype=np.int64)

    if spec.kind == "composite":
        tri_region, vert_region = _assign_regions(spec, pts, tris, h)
    else:
        tri_region = np.zeros(len(tris), np.int64)
        vert_region = np.zeros(len(pts), np.int64)

    return PlanarMesh(pts, tris, boundary, vert_region, tri_region, float(spec.height))


def _relax(points, n_fixed, poly, h):
    """One Laplacian sweep of the free vertices over their Delaunay neighbours."""
    tri = Delaunay(points)
    simp = tri.simplices
    cent = points[simp].mean(axis=1)
    simp = simp[shapely.contains_xy(poly, cent[:, 0], cent[:, 1])]
    n = len(points)
    acc = np.zeros_like(points)
    cnt = np.zeros(n)
    for i, j in ((0, 1), (1, 2), (2, 0), (1, 0), (2, 1), (0, 2)):
        np.add.at(acc, simp[:, i], points[simp[:, j]])
        np.add.at(cnt, simp[:, i], 1)
    new = points.copy()
    free = np.arange(n_fixed, n)
    ok = cnt[free] > 0
    cand = acc[free[ok]] / cnt[free[ok], None]
    inner = poly.buffer(-0.3 * h)
    inside = shapely.contains_xy(inner, cand[:, 0], cand[:, 1])
    idx = free[ok][inside]
    new[idx] = cand[inside]
    return new


def _assign_regions(spec, pts, tris, h):
    cent = pts[tris].mean(axis=1)
    tri_region = np.full(len(tris), -1, np.int64)
    polys = [shapely.affinity.translate(Polygon(_outline(q.spec, h)), *q.offset) for q in spec.parts]
    for q, pg in zip(spec.parts, polys):
        inside = shapely.contains_xy(pg, cent[:, 0], cent[:, 1])
        tri_region[inside & (tri_region < 0)] = q.region
    if (tri_region < 0).any():
        # centroid fell in a sliver between polygonal approximations
        for t in np.where(tri_region < 0)[0]:
            d = [pg.distance(Point(cent[t])) for pg in polys]
            tri_region[t] = spec.parts[int(np.argmin(d))].region
    vert_region = np.zeros(len(pts), np.int64)
    # a vertex takes the largest region id among incident triangles
    np.maximum.at(vert_region, tris.ravel(), np.repeat(tri_region, 3))
    return tri_region, vert_region


# --------------------------------------------------------------------------
# queries


def boundary_normals(mesh: PlanarMesh, positions=None) -> np.ndarray:
    """Outward unit normals at boundary vertices, ordered like ``mesh.boundary``.

    Each normal bisects the outward normals of the two adjacent boundary
    edges.
    """
    p = mesh.boundary_polygon(positions)
    e_next = np.roll(p, -1, axis=0) - p
    # outward normal of a CCW edge (dx, dy) is (dy, -dx)
    n_edge = np.column_stack([e_next[:, 1], -e_next[:, 0]])
    n_edge /= np.linalg.norm(n_edge, axis=1, keepdims=True)
    n = n_edge + np.roll(n_edge, 1, axis=0)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    # 180-degree reversal cannot happen on a simple polygon, but guard anyway
    bad = norm[:, 0] < 1e-12
    n[bad] = n_edge[bad]
    norm[bad] = 1.0
    return n / norm


def _segment_distance(points, a, b):
    """Distance from each point to each segment [a_j, b_j]: (P, S) array."""
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _winding_inside(points, poly):
    """Even-odd crossing test, vectorised over points."""
    x, y = points[:, 0:1], points[:, 1:2]
    x0, y0 = poly[:, 0][None], poly[:, 1][None]
    x1, y1 = np.roll(poly[:, 0], -1)[None], np.roll(poly[:, 1], -1)[None]
    cond = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    cross = cond & (x < xint)
    return (cross.sum(axis=1) % 2) == 1


def signed_distance(mesh: PlanarMesh, point, positions=None) -> np.ndarray | float:
    """Signed distance to the boundary polygon (negative inside).

    Accepts a single 2D point or an (n, 2) array.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    poly = mesh.boundary_polygon(positions)
    d = _segment_distance(pts, poly, np.roll(poly, -1, axis=0)).min(axis=1)
    inside = _winding_inside(pts, poly)
    sd = np.where(inside, -d, d)
    sd[d <= 1e-12] = 0.0
    return float(sd[0]) if single else sd


def polygon_extent(poly: np.ndarray, direction) -> float:
    """Width of a point set projected on ``direction``."""
    u = np.asarray(direction, float)
    u = u / np.linalg.norm(u)
    proj = poly @ u
    return float(proj.max() - proj.min())


# --------------------------------------------------------------------------
# shape sets


LIBRARY = (
    ShapeSpec("disk", {"radius": 0.025}),
    ShapeSpec("box", {"width": 0.05, "height": 0.03}),
    ShapeSpec("box", {"width": 0.04, "height": 0.04}),
    ShapeSpec("rounded-box", {"width": 0.06, "height": 0.035, "corner_radius": 0.008}),
    ShapeSpec("ellipse", {"a": 0.035, "b": 0.02}),
    ShapeSpec("capsule", {"length": 0.04, "radius": 0.012}),
    ShapeSpec("L-shape", {"width": 0.05, "height": 0.045, "thickness": 0.015}),
    ShapeSpec("T-shape", {"width": 0.055, "height": 0.05, "thickness": 0.016}),
    ShapeSpec("annulus-sector", {"inner_radius": 0.02, "outer_radius": 0.04, "span": 1.8}),
    ShapeSpec("star", {"outer_radius": 0.035, "inner_radius": 0.018, "points": 5}),
    ShapeSpec("box", {"width": 0.07, "height": 0.018}),
    ShapeSpec("disk", {"radius": 0.018}),
    ShapeSpec("ellipse", {"a": 0.04, "b": 0.014}),
)
"""Thirteen primitive training shapes (4-8 cm footprints)."""

TEST_OBJECTS = (
    ShapeSpec("disk", {"radius": 0.021}),
    ShapeSpec("capsule", {"length": 0.045, "radius": 0.01}),
    ShapeSpec("L-shape", {"width": 0.045, "height": 0.04, "thickness": 0.013}),
    ShapeSpec("box", {"width": 0.055, "height": 0.026}),
    ShapeSpec("rounded-box", {"width": 0.05, "height": 0.032, "corner_radius": 0.005}),
    ShapeSpec("star", {"outer_radius": 0.03, "inner_radius": 0.019, "points": 6}),
    ShapeSpec(
        "composite",
        parts=(
            Part(ShapeSpec("box", {"width": 0.04, "height": 0.03}), (0.0, 0.0), 0),
            Part(ShapeSpec("box", {"width": 0.022, "height": 0.02}), (0.031, 0.0), 1),
        ),
    ),
)
"""Seven held-out evaluation objects; the last one has a second material region."""

COMPOSITE_BASE_E = 2e9
"""Young's modulus of region 0 of the held-out composite; region 1 follows the sweep."""

_NO_JITTER = {"points", "span"}


def jitter_spec(spec: ShapeSpec, rng, scale: float = 0.1) -> ShapeSpec:
    """Scale every length parameter by an independent factor in [1-scale, 1+scale]."""

    def one(s):
        params = {
            k: (v if k in _NO_JITTER else float(v * rng.uniform(1 - scale, 1 + scale)))
            for k, v in s.params.items()
        }
        return ShapeSpec(s.kind, params, s.parts, s.height)

    if spec.kind != "composite":
        out = one(spec)
        # keep derived feasibility rules intact after independent scaling
        try:
            _validate(out)
            return out
        except GeometryError:
            return spec
    return spec


def region_materials(spec: ShapeSpec, E: float):
    """Young's modulus per material region for an object at sweep value ``E``."""
    if spec.kind == "composite":
        return {r: (E if r > 0 else COMPOSITE_BASE_E) for r in spec.regions}
    return {0: E}
