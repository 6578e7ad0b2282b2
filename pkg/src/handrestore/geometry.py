"""Camera model, voxel grid and ray-voxel traversal.

Conventions used throughout the package:

* camera frame: x right, y down, z forward; the camera sits at the origin
* pixel (u, v) is column u, row v; its center is at (u + 0.5, v + 0.5)
* depth images store z-depth in meters, 0 marks a missing value
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics with a fixed field of view (fx = 1.25 * width)."""
        f = 1.25 * width
        return cls(f, f, width / 2, height / 2, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Ray:
    pixel: tuple[int, int]
    dir: np.ndarray


@dataclass(frozen=True)
class RayVoxelPair:
    ray_id: int
    voxel_id: int
    t_in: float
    t_out: float


def pixel_dirs(k: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit ray directions for arrays of pixel coordinates, shape (..., 3)."""
    x = (np.asarray(u, dtype=np.float64) + 0.5 - k.cx) / k.fx
    y = (np.asarray(v, dtype=np.float64) + 0.5 - k.cy) / k.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(k: CameraIntrinsics, u: int, v: int) -> Ray:
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    return Ray((int(u), int(v)), pixel_dirs(k, u, v))


def image_dirs(k: CameraIntrinsics) -> np.ndarray:
    """Unit directions for every pixel, shape (H, W, 3)."""
    vv, uu = np.mgrid[0:k.height, 0:k.width]
    return pixel_dirs(k, uu, vv)


def backproject(depth: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Back-project valid depth pixels.

    Returns (points (N, 3), pixels (N, 2) as (u, v) integer pairs), row-major
    pixel order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (k.height, k.width):
        raise GeometryError(f"depth shape {depth.shape} does not match intrinsics")
    v, u = np.nonzero(depth > 0)
    z = depth[v, u]
    x = (u + 0.5 - k.cx) / k.fx * z
    y = (v + 0.5 - k.cy) / k.fy * z
    return np.stack([x, y, z], axis=1), np.stack([u, v], axis=1)


def project(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Perspective projection to continuous pixel coordinates (u, v)."""
    points = np.asarray(points, dtype=np.float64)
    u = points[:, 0] / points[:, 2] * k.fx + k.cx
    v = points[:, 1] / points[:, 2] * k.fy + k.cy
    return np.stack([u, v], axis=1)


@dataclass
class VoxelGrid:
    origin: np.ndarray
    cell_size: np.ndarray
    resolution: int
    occupancy: np.ndarray  # (R, R, R) bool
    point_cells: np.ndarray  # (N, 3) int cell index of each point
    point_index_lists: dict[int, np.ndarray] = field(repr=False)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell_size * self.resolution

    def flat_id(self, cell) -> int:
        i, j, k = (int(c) for c in cell)
        r = self.resolution
        return (i * r + j) * r + k

    def cell_of(self, flat: int) -> tuple[int, int, int]:
        r = self.resolution
        return flat // (r * r), (flat // r) % r, flat % r

    def cell_bounds(self, flat: int) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin + self.cell_size * np.asarray(self.cell_of(flat), dtype=np.float64)
        return lo, lo + self.cell_size

    def centers(self, flat_ids) -> np.ndarray:
        flat_ids = np.asarray(flat_ids, dtype=np.int64)
        r = self.resolution
        idx = np.stack([flat_ids // (r * r), (flat_ids // r) % r, flat_ids % r], axis=-1)
        return self.origin + (idx + 0.5) * self.cell_size

    def bin_points(self, points: np.ndarray) -> np.ndarray:
        """Half-open binning; points on the top face fall into the last cell."""
        idx = np.floor((points - self.origin) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def point_flat_ids(self) -> np.ndarray:
        r = self.resolution
        c = self.point_cells
        return (c[:, 0] * r + c[:, 1]) * r + c[:, 2]

    @property
    def occupied_ids(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy.ravel())


def build_voxel_grid(points: np.ndarray, resolution: int = 8, margin: float = 0.05) -> VoxelGrid:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise GeometryError("no valid geometry")
    if resolution < 1:
        raise GeometryError("resolution must be >= 1")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = hi - lo
    # a degenerate axis still needs a finite cell
    extent = np.where(extent > 0, extent, 1e-3)
    origin = lo - margin * extent
    cell = extent * (1 + 2 * margin) / resolution
    grid = VoxelGrid(origin, cell, resolution,
                     np.zeros((resolution,) * 3, dtype=bool),
                     np.zeros((0, 3), dtype=np.int64), {})
    cells = grid.bin_points(points)
    grid.point_cells = cells
    flat = grid.point_flat_ids()
    order = np.argsort(flat, kind="stable")
    ids, starts = np.unique(flat[order], return_index=True)
    ends = np.append(starts[1:], len(order))
    grid.point_index_lists = {int(i): order[s:e] for i, s, e in zip(ids, starts, ends)}
    grid.occupancy.ravel()[ids] = True
    return grid


def _box_span(lo: np.ndarray, hi: np.ndarray, d: np.ndarray) -> tuple[float, float]:
    t0, t1 = 0.0, math.inf
    for a in range(3):
        if d[a] == 0.0:
            if not (lo[a] <= 0.0 <= hi[a]):
                return 1.0, 0.0
            continue
        ta = lo[a] / d[a]
        tb = hi[a] / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0, t1


def traverse_cells(grid: VoxelGrid, d: np.ndarray) -> list[tuple[int, float, float]]:
    """Every cell crossed by the ray from the origin, as (flat_id, t_in, t_out).

    Incremental grid walk: one integer step per boundary crossing, next
    boundary distances recomputed from the cell index so they do not drift.
    """
    d = np.asarray(d, dtype=np.float64)
    o = grid.origin
    s = grid.cell_size
    n = grid.resolution
    t0, t1 = _box_span(o, grid.upper, d)
    if not t0 < t1:
        return []
    t_nudge = t0 + 1e-9 * float(s.min())
    p = t_nudge * d
    idx = [min(max(int(math.floor((p[a] - o[a]) / s[a])), 0), n - 1) for a in range(3)]
    step = [1 if d[a] > 0 else (-1 if d[a] < 0 else 0) for a in range(3)]

    def next_boundary(a: int) -> float:
        if step[a] == 0:
            return math.inf
        b = idx[a] + 1 if step[a] > 0 else idx[a]
        return (o[a] + b * s[a]) / d[a]

    t_max = [next_boundary(a) for a in range(3)]
    out = []
    t = t0
    while True:
        t_exit = min(t_max[0], t_max[1], t_max[2], t1)
        if t_exit > t:
            out.append(((idx[0] * n + idx[1]) * n + idx[2], t, t_exit))
            t = t_exit
        if t_exit >= t1:
            break
        a = int(np.argmin(t_max))
        idx[a] += step[a]
        if not 0 <= idx[a] < n:
            break
        t_max[a] = next_boundary(a)
    return out


def traverse(grid: VoxelGrid, ray: Ray | np.ndarray, ray_id: int = 0) -> list[RayVoxelPair]:
    d = ray.dir if isinstance(ray, Ray) else np.asarray(ray, dtype=np.float64)
    occ = grid.occupancy.ravel()
    return [RayVoxelPair(ray_id, c, ti, to) for c, ti, to in traverse_cells(grid, d) if occ[c]]


def compose_depth(pairs_per_ray, rays, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Depth from per-ray scored pairs: argmax logit, entry + offset along the ray.

    ``pairs_per_ray[i]`` is a list of ``(RayVoxelPair, logit, offset)``. Returns a
    vector of depths (one per ray) or, when ``shape`` is given, an image with
    each ray's depth written at its pixel.
    """
    depths = np.zeros(len(rays))
    for i, (scored, ray) in enumerate(zip(pairs_per_ray, rays)):
        if not scored:
            continue
        for pair, _, off in scored:
            if not 0.0 <= off <= pair.t_out - pair.t_in:
                raise GeometryError(f"offset {off} outside voxel span on ray {i}")
        # max logit; ties resolved toward the nearest voxel
        best = min(scored, key=lambda x: (-x[1], x[0].t_in))
        d = ray.dir if isinstance(ray, Ray) else np.asarray(ray)
        depths[i] = (best[0].t_in + best[2]) * d[2]
    if shape is None:
        return depths
    img = np.zeros(shape)
    for ray, z in zip(rays, depths):
        u, v = ray.pixel
        img[v, u] = z
    return img
