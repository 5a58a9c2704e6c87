"""Top-down depth/stiffness rendering and per-pixel grasp maps.

Image rows run along -y and columns along +x, so a pixel (r, c) sits at
``(origin_x + c * pixel_size, origin_y - r * pixel_size)``. Grasp angles are
always expressed in the world frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import PlanarMesh
from .grasp import GraspRect, GripperConfig, normalize_angle

E_MIN = 2e4
E_MAX = 2e9


class ImagingError(ValueError):
    """Raised when a scene does not fit the camera or an augmentation fails."""


def normalize_stiffness(E) -> np.ndarray | float:
    """Log-scale map of Young's modulus onto [0, 1] (2e4 -> 0, 2e9 -> 1)."""
    E_arr = np.asarray(E, dtype=float)
    if np.any(~(E_arr > 0)):
        raise ValueError("Young's modulus must be > 0")
    s = (np.log10(E_arr) - math.log10(E_MIN)) / (math.log10(E_MAX) - math.log10(E_MIN))
    s = np.clip(s, 0.0, 1.0)
    return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class CameraModel:
    """Orthographic top-down camera.

    ``origin`` is the world position of the center of pixel (0, 0); by default
    the image is centered on the world origin.
    """

    width: int = 96
    height: int = 96
    pixel_size: float = 0.0025
    camera_height: float = 0.5
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be > 0")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not self.camera_height > 0:
            raise ValueError("camera_height must be > 0")
        if self.origin is None:
            ox = -0.5 * (self.width - 1) * self.pixel_size
            oy = 0.5 * (self.height - 1) * self.pixel_size
            object.__setattr__(self, "origin", (ox, oy))
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        ox, oy = self.origin
        return np.array([ox + 0.5 * (self.width - 1) * self.pixel_size,
                         oy - 0.5 * (self.height - 1) * self.pixel_size])

    def pixel_to_world(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        ox, oy = self.origin
        return np.stack([ox + cols * self.pixel_size, oy - rows * self.pixel_size], axis=-1)

    def world_to_pixel(self, xy) -> np.ndarray:
        """Fractional (row, col) of world points."""
        xy = np.asarray(xy, dtype=float)
        ox, oy = self.origin
        return np.stack([(oy - xy[..., 1]) / self.pixel_size, (xy[..., 0] - ox) / self.pixel_size], axis=-1)

    def pixel_centers(self) -> np.ndarray:
        r, c = np.mgrid[0:self.height, 0:self.width]
        return self.pixel_to_world(r, c)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "pixel_size": self.pixel_size,
                "camera_height": self.camera_height, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(int(d["width"]), int(d["height"]), float(d["pixel_size"]),
                   float(d["camera_height"]), tuple(d["origin"]))


@dataclass
class SceneImage:
    depth: np.ndarray
    stiffness: np.ndarray


@dataclass
class GraspMaps:
    q: np.ndarray
    cos2: np.ndarray
    sin2: np.ndarray
    width: np.ndarray
    skipped: int = 0

    @classmethod
    def zeros(cls, shape) -> "GraspMaps":
        return cls(*(np.zeros(shape, np.float32) for _ in range(4)))

    def stack(self) -> np.ndarray:
        return np.stack([self.q, self.cos2, self.sin2, self.width])

    @classmethod
    def from_stack(cls, arr) -> "GraspMaps":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy(), arr[3].copy())


@dataclass
class SceneSample:
    image: SceneImage
    maps: GraspMaps
    metadata: dict = field(default_factory=dict)

    def planes(self) -> np.ndarray:
        """(6, H, W) float32: depth, stiffness, Q, cos2, sin2, W."""
        return np.stack([self.image.depth, self.image.stiffness, self.maps.q, self.maps.cos2,
                         self.maps.sin2, self.maps.width]).astype(np.float32)


# --------------------------------------------------------------------------
# rendering


def _region_E(materials, region: int) -> float:
    if isinstance(materials, dict):
        m = materials[region]
    else:
        m = materials
    return float(getattr(m, "young_modulus", m))


def render_scene(meshes, materials, camera: CameraModel, positions=None) -> SceneImage:
    """Rasterize object footprints at pixel centers.

    ``meshes`` is one PlanarMesh or a list; ``materials`` is matched to it
    (per mesh: a Material, a Young's modulus, or a dict region -> either).
    ``positions`` optionally replaces vertex positions (deformed footprint).
    """
    if isinstance(meshes, PlanarMesh):
        meshes, materials, positions = [meshes], [materials], [positions]
    elif positions is None:
        positions = [None] * len(meshes)
    depth = np.full(camera.shape, camera.camera_height, np.float32)
    stiff = np.zeros(camera.shape, np.float32)
    lo = camera.pixel_to_world(camera.height - 0.5, -0.5)
    hi = camera.pixel_to_world(-0.5, camera.width - 0.5)
    for mesh, mat, pos in zip(meshes, materials, positions):
        x = mesh.vertices if pos is None else np.asarray(pos, float)
        if x[:, 0].min() < lo[0] or x[:, 1].min() < lo[1] or x[:, 0].max() > hi[0] or x[:, 1].max() > hi[1]:
            raise ImagingError("object footprint extends outside the camera frame")
        h = np.float32(camera.camera_height - mesh.height)
        if not h > 0:
            raise ImagingError("object taller than the camera height")
        values = {r: np.float32(normalize_stiffness(_region_E(mat, r))) for r in np.unique(mesh.triangle_region)}
        for t, tri in enumerate(mesh.triangles):
            rows, cols = _raster_triangle(x[tri], camera)
            if len(rows):
                depth[rows, cols] = h
                stiff[rows, cols] = values[mesh.triangle_region[t]]
    return SceneImage(depth, stiff)


def _raster_triangle(p, camera: CameraModel):
    rc = camera.world_to_pixel(p)
    r0 = max(int(math.floor(rc[:, 0].min())), 0)
    r1 = min(int(math.ceil(rc[:, 0].max())), camera.height - 1)
    c0 = max(int(math.floor(rc[:, 1].min())), 0)
    c1 = min(int(math.ceil(rc[:, 1].max())), camera.width - 1)
    if r1 < r0 or c1 < c0:
        return np.zeros(0, int), np.zeros(0, int)
    rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    q = camera.pixel_to_world(rr, cc).reshape(-1, 2)
    a, b, c = p
    den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    l1 = ((b[1] - c[1]) * (q[:, 0] - c[0]) + (c[0] - b[0]) * (q[:, 1] - c[1])) / den
    l2 = ((c[1] - a[1]) * (q[:, 0] - c[0]) + (a[0] - c[0]) * (q[:, 1] - c[1])) / den
    l3 = 1.0 - l1 - l2
    eps = -1e-9
    inside = (l1 >= eps) & (l2 >= eps) & (l3 >= eps)
    return rr.ravel()[inside], cc.ravel()[inside]


def footprint(image: SceneImage, camera: CameraModel) -> np.ndarray:
    """Boolean mask of pixels covered by an object."""
    return image.depth < camera.camera_height


# --------------------------------------------------------------------------
# grasp maps


def encode_maps(grasps, camera: CameraModel, gripper: GripperConfig) -> GraspMaps:
    """Paint each grasp's center-third rectangle; the higher quality wins on overlap."""
    maps = GraspMaps.zeros(camera.shape)
    centers = camera.pixel_centers()
    skipped = 0
    for g in grasps:
        rc = camera.world_to_pixel(np.asarray(g.center, float))
        if not (-0.5 <= rc[0] < camera.height - 0.5 and -0.5 <= rc[1] < camera.width - 0.5):
            skipped += 1
            continue
        u = g.axis
        # rasterize about the nearest pixel center so the label is point-symmetric
        r0, c0 = int(round(rc[0])), int(round(rc[1]))
        d = centers - camera.pixel_to_world(r0, c0)
        along = d[..., 0] * u[0] + d[..., 1] * u[1]
        across = -d[..., 0] * u[1] + d[..., 1] * u[0]
        tol = 1e-9
        mask = (np.abs(along) <= g.width / 6 + tol) & (np.abs(across) <= gripper.jaw_radius + tol)
        # the rectangle may be thinner than a pixel; always keep the center pixel
        mask[r0, c0] = True
        q = np.float32(g.quality)
        win = mask & (q > maps.q)
        maps.q[win] = q
        maps.cos2[win] = np.float32(math.cos(2 * g.angle))
        maps.sin2[win] = np.float32(math.sin(2 * g.angle))
        maps.width[win] = np.float32(min(g.width / gripper.max_opening, 1.0))
    maps.skipped = skipped
    return maps


def _local_maxima(v: np.ndarray) -> np.ndarray:
    """Flat indices of strict 8-neighbour maxima; equal neighbours resolve to the earlier pixel."""
    H, W = v.shape
    pad = np.full((H + 2, W + 2), -np.inf)
    pad[1:-1, 1:-1] = v
    ok = np.ones((H, W), bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = pad[1 + dr:H + 1 + dr, 1 + dc:W + 1 + dc]
            later = dr > 0 or (dr == 0 and dc > 0)
            ok &= (v > nb) | ((v == nb) & later)
    ok &= v > 0
    return np.flatnonzero(ok)


def decode_grasps(maps: GraspMaps, camera: CameraModel, gripper: GripperConfig, k: int = 5,
                  sigma: float = 2.0) -> list[GraspRect]:
    """Top-k grasps at the strongest local maxima of the smoothed quality map."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(maps.q, dtype=np.float64)
    if not np.any(q > 0):
        return []
    sm = ndimage.gaussian_filter(q, sigma, mode="constant")
    idx = _local_maxima(sm)
    order = np.lexsort((idx, -sm.ravel()[idx]))
    out = []
    for i in idx[order][:k]:
        r, c = divmod(int(i), camera.width)
        theta = normalize_angle(0.5 * math.atan2(float(maps.sin2[r, c]), float(maps.cos2[r, c])))
        xy = camera.pixel_to_world(r, c)
        out.append(GraspRect((float(xy[0]), float(xy[1])), theta,
                             float(maps.width[r, c]) * gripper.max_opening, float(sm[r, c])))
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotation: tuple[float, float] = (0.0, 2 * math.pi)
    zoom: tuple[float, float] = (0.85, 1.15)
    translation: float = 0.1
    max_attempts: int = 10


def draw_transform(rng, params: AugmentParams, camera: CameraModel) -> tuple[float, float, np.ndarray]:
    phi = float(rng.uniform(*params.rotation))
    s = float(rng.uniform(*params.zoom))
    span = params.translation * np.array([camera.width, camera.height]) * camera.pixel_size
    t = rng.uniform(-1, 1, size=2) * span
    return phi, s, t


def transform_points(xy, phi: float, zoom: float, shift, camera: CameraModel) -> np.ndarray:
    """Similarity about the image center: zoom, rotate by ``phi``, then shift."""
    c0 = camera.center
    c, s = math.cos(phi), math.sin(phi)
    d = np.asarray(xy, float) - c0
    return c0 + zoom * np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], -1) + shift


def transform_grasp(g: GraspRect, phi: float, zoom: float, shift, camera: CameraModel) -> GraspRect:
    center = transform_points(np.asarray(g.center, float), phi, zoom, shift, camera)
    return GraspRect((float(center[0]), float(center[1])), normalize_angle(g.angle + phi), g.width * zoom, g.quality)


def apply_transform(sample: SceneSample, phi: float, zoom: float, shift, camera: CameraModel) -> SceneSample:
    """Resample every plane of ``sample`` under a similarity transform."""
    shift = np.asarray(shift, float)
    if phi == 0.0 and zoom == 1.0 and not shift.any():
        return SceneSample(SceneImage(sample.image.depth.copy(), sample.image.stiffness.copy()),
                           GraspMaps(*(a.copy() for a in sample.maps.stack())), dict(sample.metadata))
    # inverse map: output pixel center -> input world point -> input pixel
    out_xy = camera.pixel_centers()
    c0 = camera.center
    c, s = math.cos(-phi), math.sin(-phi)
    d = (out_xy - c0 - shift) / zoom
    src = c0 + np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], -1)
    rc = camera.world_to_pixel(src)
    coords = [rc[..., 0], rc[..., 1]]

    def nearest(a, fill):
        return ndimage.map_coordinates(a, coords, order=0, mode="constant", cval=fill).astype(np.float32)

    depth = ndimage.map_coordinates(sample.image.depth.astype(np.float64), coords, order=1, mode="constant",
                                    cval=camera.camera_height).astype(np.float32)
    stiff = nearest(sample.image.stiffness, 0.0)
    q = nearest(sample.maps.q, 0.0)
    cos2 = nearest(sample.maps.cos2, 0.0).astype(np.float64)
    sin2 = nearest(sample.maps.sin2, 0.0).astype(np.float64)
    w = nearest(sample.maps.width, 0.0)
    meta = dict(sample.metadata)
    meta["augment"] = {"rotation": phi, "zoom": zoom, "shift": [float(shift[0]), float(shift[1])]}
    if "grasps" in meta and "gripper" in meta:
        # re-encode transformed labels instead of resampling the painted rectangles
        gripper = GripperConfig(**meta["gripper"])
        moved = [transform_grasp(GraspRect.from_dict(d), phi, zoom, shift, camera) for d in meta["grasps"]]
        meta["grasps"] = [g.to_dict() for g in moved]
        return SceneSample(SceneImage(depth, stiff), encode_maps(moved, camera, gripper), meta)
    lab = q > 0
    ang = 0.5 * np.arctan2(sin2[lab], cos2[lab]) + phi
    maps = GraspMaps.zeros(camera.shape)
    maps.q[lab] = q[lab]
    maps.cos2[lab] = np.cos(2 * ang).astype(np.float32)
    maps.sin2[lab] = np.sin(2 * ang).astype(np.float32)
    maps.width[lab] = np.minimum(w[lab] * np.float32(zoom), np.float32(1.0))
    return SceneSample(SceneImage(depth, stiff), maps, meta)


def augment(sample: SceneSample, seed, params: AugmentParams = AugmentParams(),
            camera: CameraModel | None = None) -> SceneSample:
    """Random rotation, zoom and recentering crop applied jointly to all planes.

    Draws are repeated until the object footprint stays inside the frame.
    """
    camera = camera or CameraModel.from_dict(sample.metadata["camera"])
    rng = np.random.default_rng(seed)
    fp = footprint(sample.image, camera)
    rows, cols = np.nonzero(fp)
    # footprint corners in world coordinates, padded by half a pixel
    pts = camera.pixel_to_world(rows, cols)
    half = 0.5 * camera.pixel_size
    pts = np.concatenate([pts + np.array([dx, dy]) for dx in (-half, half) for dy in (-half, half)])
    lo = camera.pixel_to_world(camera.height - 0.5, -0.5)
    hi = camera.pixel_to_world(-0.5, camera.width - 0.5)
    for _ in range(params.max_attempts):
        phi, zoom, shift = draw_transform(rng, params, camera)
        moved = transform_points(pts, phi, zoom, shift, camera)
        if len(moved) == 0 or (moved.min(0) >= lo).all() and (moved.max(0) <= hi).all():
            return apply_transform(sample, phi, zoom, shift, camera)
    raise ImagingError("augmentation kept pushing the object out of frame")


# --------------------------------------------------------------------------
# previews


def write_pgm(path, array, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    a = np.asarray(array)
    a = np.clip(np.round(a), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(a.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: four whitespace-separated tokens, then exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos + 1).reshape(h, w)


def export_previews(sample: SceneSample, out_dir, stem: str = "sample") -> list:
    """Depth and stiffness as 16-bit PGM, grasp maps as 8-bit PGM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    planes = {
        "depth": (sample.image.depth * 1e4, 65535),
        "stiffness": (sample.image.stiffness * 65535, 65535),
        "q": (sample.maps.q * 255, 255),
        "cos2": ((sample.maps.cos2 + 1) * 127.5, 255),
        "sin2": ((sample.maps.sin2 + 1) * 127.5, 255),
        "width": (sample.maps.width * 255, 255),
    }
    for name, (arr, mx) in planes.items():
        p = out / f"{stem}_{name}.pgm"
        write_pgm(p, arr, mx)
        files.append(p)
    return files


def with_metadata(sample: SceneSample, **items) -> SceneSample:
    meta = dict(sample.metadata)
    meta.update(items)
    return replace(sample, metadata=meta)
