"""Analytic solids for the scene generator and the handover collision world.

Each solid has a rigid pose (rotation ``R`` with local->world columns, center
``c``) and supports ray casting from the camera origin, point membership, and
distance queries where the handover needs them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INF = np.inf


def _quadratic_roots(a, b, c):
    """Both roots of a t^2 + b t + c (nan where none); a may be ~0."""
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        # numerically stable form
        q = -0.5 * (b + np.copysign(sq, b))
        t1 = q / a
        t2 = c / q
        lin = np.abs(a) < 1e-14
        t_lin = np.where(np.abs(b) > 0, -c / b, np.nan)
        t1 = np.where(lin, t_lin, t1)
        t2 = np.where(lin, np.nan, t2)
    return np.minimum(t1, t2), np.maximum(t1, t2)


@dataclass
class Solid:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_local(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.c) @ self.R

    def cast(self, dirs: np.ndarray, origin: np.ndarray | None = None):
        """First positive hit of rays ``origin + t * dirs``: (t, world normal)."""
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        o = (origin - self.c) @ self.R
        d = np.asarray(dirs, dtype=np.float64) @ self.R
        t, n = self._cast_local(o, d)
        return t, n @ self.R.T

    def inside(self, p: np.ndarray) -> np.ndarray:
        return self._inside_local(self.to_local(p))

    def moved(self, R: np.ndarray, t: np.ndarray) -> "Solid":
        """Copy with the world transform p -> R p + t applied."""
        import copy
        s = copy.copy(self)
        s.R = R @ self.R
        s.c = R @ self.c + t
        return s


@dataclass
class Sphere(Solid):
    radius: float = 0.05

    def _cast_local(self, o, d):
        b = 2 * d @ o
        cc = o @ o - self.radius ** 2
        t0, t1 = _quadratic_roots(np.einsum("ij,ij->i", d, d), b, np.full(len(d), cc))
        t = np.where(t0 > 1e-12, t0, np.where(t1 > 1e-12, t1, INF))
        t = np.where(np.isnan(t), INF, t)
        p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
        return t, p / self.radius

    def _inside_local(self, p):
        return np.einsum("ij,ij->i", p, p) <= self.radius ** 2

    def radius_at(self, h, phi):
        return np.sqrt(np.maximum(self.radius ** 2 - np.asarray(h) ** 2, 0.0)) + 0 * np.asarray(phi)

    @property
    def z_range(self):
        return -self.radius, self.radius

    @property
    def grip_band(self):
        return -0.55 * self.radius, 0.55 * self.radius


@dataclass
class Frustum(Solid):
    """Solid truncated cone along local z from z0 (radius r0) to z1 (radius r1)."""

    r0: float = 0.03
    r1: float = 0.03
    z0: float = -0.05
    z1: float = 0.05

    @property
    def slope(self) -> float:
        return (self.r1 - self.r0) / (self.z1 - self.z0)

    def _r(self, z):
        return self.r0 + self.slope * (z - self.z0)

    def _cast_local(self, o, d):
        k = self.slope
        rz0 = self.r0 + k * (o[2] - self.z0)  # radius at the origin's height
        a = d[:, 0] ** 2 + d[:, 1] ** 2 - (k * d[:, 2]) ** 2
        b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1] - rz0 * k * d[:, 2])
        cc = np.full(len(d), o[0] ** 2 + o[1] ** 2 - rz0 ** 2)
        t_best = np.full(len(d), INF)
        n_best = np.zeros_like(d)
        for t in _quadratic_roots(a, b, cc):
            z = o[2] + t * d[:, 2]
            ok = (t > 1e-12) & (z >= self.z0) & (z <= self.z1) & (self._r(z) >= 0) & ~np.isnan(t)
            ok &= t < t_best
            p = o + np.where(ok, t, 0)[:, None] * d
            rr = np.hypot(p[:, 0], p[:, 1])
            rr = np.where(rr > 0, rr, 1.0)
            n = np.stack([p[:, 0] / rr, p[:, 1] / rr, np.full(len(d), -k)], axis=1)
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            t_best = np.where(ok, t, t_best)
            n_best = np.where(ok[:, None], n, n_best)
        for zc, rc, sgn in ((self.z0, self.r0, -1.0), (self.z1, self.r1, 1.0)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zc - o[2]) / d[:, 2]
            p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            ok = np.isfinite(t) & (t > 1e-12) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= rc ** 2) & (t < t_best)
            t_best = np.where(ok, t, t_best)
            n_best = np.where(ok[:, None], np.array([0.0, 0.0, sgn]), n_best)
        return t_best, n_best

    def _inside_local(self, p):
        z = p[:, 2]
        return (z >= self.z0) & (z <= self.z1) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= self._r(z) ** 2)

    def radius_at(self, h, phi):
        return self._r(np.asarray(h, dtype=np.float64)) + 0 * np.asarray(phi)

    @property
    def z_range(self):
        return self.z0, self.z1

    @property
    def grip_band(self):
        m = 0.2 * (self.z1 - self.z0)
        return self.z0 + m, self.z1 - m


@dataclass
class Box(Solid):
    half: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.05]))

    def _cast_local(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (-self.half - o) * inv
            tb = (self.half - o) * inv
        tmin = np.where(np.isnan(ta), -INF, np.minimum(ta, tb))
        tmax = np.where(np.isnan(ta), INF, np.maximum(ta, tb))
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = d == 0
        inside_slab = np.abs(o) <= self.half
        tmin = np.where(par, np.where(inside_slab, -INF, INF), tmin)
        tmax = np.where(par, np.where(inside_slab, INF, -INF), tmax)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        axis_near = tmin.argmax(axis=1)
        axis_far = tmax.argmin(axis=1)
        hit = (t_near <= t_far) & (t_far > 1e-12)
        front = t_near > 1e-12
        t = np.where(hit, np.where(front, t_near, t_far), INF)
        axis = np.where(front, axis_near, axis_far)
        n = np.zeros_like(d)
        rows = np.arange(len(d))
        sgn = np.where(front, -np.sign(d[rows, axis]), np.sign(d[rows, axis]))
        n[rows, axis] = sgn
        return t, n

    def _inside_local(self, p):
        return np.all(np.abs(p) <= self.half, axis=1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Unsigned distance from world points to the box (0 inside)."""
        q = np.abs(self.to_local(p)) - self.half
        return np.linalg.norm(np.maximum(q, 0.0), axis=1)

    def radius_at(self, h, phi):
        phi = np.asarray(phi, dtype=np.float64)
        with np.errstate(divide="ignore"):
            rx = self.half[0] / np.abs(np.cos(phi))
            ry = self.half[1] / np.abs(np.sin(phi))
        return np.minimum(rx, ry) + 0 * np.asarray(h)

    @property
    def z_range(self):
        return -self.half[2], self.half[2]

    @property
    def grip_band(self):
        return -0.6 * self.half[2], 0.6 * self.half[2]


@dataclass
class Plane(Solid):
    """Half-space behind the plane through ``c`` with normal R[:, 2] facing the camera side."""

    def _cast_local(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[2] / d[:, 2]
        t = np.where(np.isfinite(t) & (t > 1e-12), t, INF)
        return t, np.tile([0.0, 0.0, 1.0], (len(d), 1))

    def _inside_local(self, p):
        return p[:, 2] <= 0

    def coords(self, p: np.ndarray) -> np.ndarray:
        return self.to_local(p)[:, :2]


@dataclass
class Capsule(Solid):
    """Segment a-b (world) swept by ``radius``; pose fields are unused."""

    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.1]))
    radius: float = 0.009

    def cast(self, dirs, origin=None):
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        ab = self.b - self.a
        L2 = ab @ ab
        ao = origin - self.a
        # infinite cylinder part
        dd = np.einsum("ij,ij->i", d, d)
        dab = d @ ab
        aoab = ao @ ab
        a = L2 * dd - dab ** 2
        b = 2 * (L2 * (d @ ao) - dab * aoab)
        c = np.full(len(d), L2 * (ao @ ao) - aoab ** 2 - self.radius ** 2 * L2)
        t_best = np.full(len(d), INF)
        n_best = np.zeros_like(d)
        t0, _ = _quadratic_roots(a, b, c)
        s = (aoab + t0 * dab) / L2
        ok = ~np.isnan(t0) & (t0 > 1e-12) & (s >= 0) & (s <= 1)
        p = origin + np.where(ok, t0, 0)[:, None] * d
        axis_pt = self.a + np.clip(s, 0, 1)[:, None] * ab
        n = (p - axis_pt) / self.radius
        t_best = np.where(ok, t0, t_best)
        n_best = np.where(ok[:, None], n, n_best)
        for end in (self.a, self.b):
            sph = Sphere(c=end, radius=self.radius)
            t, n = sph.cast(d, origin)
            better = t < t_best
            t_best = np.where(better, t, t_best)
            n_best = np.where(better[:, None], n, n_best)
        return t_best, n_best

    def distance_to_axis(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        ab = self.b - self.a
        s = np.clip((p - self.a) @ ab / (ab @ ab), 0, 1)
        return np.linalg.norm(p - (self.a + s[:, None] * ab), axis=1)

    def inside(self, p):
        return self.distance_to_axis(p) <= self.radius

    def moved(self, R, t):
        return Capsule(a=R @ self.a + t, b=R @ self.b + t, radius=self.radius)


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments p0-p1 and q0-q1."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a <= 1e-18 and e <= 1e-18:
        return float(np.linalg.norm(r))
    if a <= 1e-18:
        s, t = 0.0, np.clip(f / e, 0, 1)
    else:
        c = d1 @ r
        if e <= 1e-18:
            t, s = 0.0, np.clip(-c / a, 0, 1)
        else:
            b = d1 @ d2
            den = a * e - b * b
            s = np.clip((b * f - c * e) / den, 0, 1) if den > 1e-18 else 0.0
            t = (b * s + f) / e
            if t < 0:
                t, s = 0.0, np.clip(-c / a, 0, 1)
            elif t > 1:
                t, s = 1.0, np.clip((b - c) / a, 0, 1)
    return float(np.linalg.norm(p0 + s * d1 - (q0 + t * d2)))


@dataclass
class Compound:
    """Union of solids sharing one pose (used for the stem glass)."""

    parts: list
    grip_part: int = 0

    @property
    def R(self):
        return self.parts[0].R

    @property
    def c(self):
        return self.parts[0].c

    def to_local(self, p):
        return self.parts[0].to_local(p)

    def cast(self, dirs, origin=None):
        t_best = np.full(len(dirs), INF)
        n_best = np.zeros((len(dirs), 3))
        for s in self.parts:
            t, n = s.cast(dirs, origin)
            better = t < t_best
            t_best = np.where(better, t, t_best)
            n_best = np.where(better[:, None], n, n_best)
        return t_best, n_best

    def inside(self, p):
        return np.any([s.inside(p) for s in self.parts], axis=0)

    def moved(self, R, t):
        return Compound([s.moved(R, t) for s in self.parts], self.grip_part)

    def radius_at(self, h, phi):
        return self.parts[self.grip_part].radius_at(h, phi)

    @property
    def z_range(self):
        lo = min(s.z_range[0] for s in self.parts)
        hi = max(s.z_range[1] for s in self.parts)
        return lo, hi

    @property
    def grip_band(self):
        return self.parts[self.grip_part].grip_band


def chord(solid, center: np.ndarray, axis: np.ndarray, half_len: float, step: float = 2e-4):
    """Sampled intersection of the segment center +- half_len*axis with a solid.

    Returns (s_min, s_max) of the inside samples along the axis, or None.
    """
    s = np.arange(-half_len, half_len + step / 2, step)
    pts = center + s[:, None] * axis
    ins = solid.inside(pts)
    if not ins.any():
        return None
    return float(s[ins].min()), float(s[ins].max())
