"""Procedural scenes of hand-held transparent objects.

A scene is a textured background plane with two distractor boxes, one
transparent object and a hand rendered as capsules along its 21-keypoint
skeleton. Depth is exact (analytic ray casting); the sensor failure modes on
the object are simulated afterwards by :func:`corrupt_depth`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import CameraIntrinsics, image_dirs
from .primitives import Box, Capsule, Compound, Frustum, Plane, Sphere

log = logging.getLogger(__name__)

OBJECT_KINDS = ("sphere", "cylinder", "box", "capped_cone", "stem_glass")
UNKNOWN_KINDS = ("capped_cone", "stem_glass")
HAND_RADIUS = 0.009
BONES = [(0, 1), (1, 2), (2, 3), (3, 4),
         (0, 5), (5, 6), (6, 7), (7, 8),
         (0, 9), (9, 10), (10, 11), (11, 12),
         (0, 13), (13, 14), (14, 15), (15, 16),
         (0, 17), (17, 18), (18, 19), (19, 20),
         (5, 9), (9, 13), (13, 17)]


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionParams:
    p_missing: float = 0.35
    p_background: float = 0.35
    p_noise: float = 0.15
    sigma: float = 0.01

    def __post_init__(self) -> None:
        ps = (self.p_missing, self.p_background, self.p_noise)
        if any(not 0.0 <= p <= 1.0 for p in ps) or sum(ps) > 1.0 + 1e-12 or self.sigma < 0:
            raise SpecError(f"invalid corruption parameters {ps}, sigma={self.sigma}")


@dataclass(frozen=True)
class GripParams:
    angle: float = 0.0  # radians about the object axis, object frame
    spread: float = 0.021  # vertical finger spacing (m)
    wrist_offset: float = 0.075  # wrist distance beyond the surface (m)
    height: float = 0.5  # grip height as a fraction of the grip band


@dataclass
class SceneSpec:
    kind: str
    dims: dict
    obj_R: np.ndarray
    obj_c: np.ndarray
    grip: GripParams | None
    plane_R: np.ndarray
    plane_c: np.ndarray
    distractors: list  # [(R, c, half)]
    intrinsics: CameraIntrinsics
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    seed: int = 0
    colors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "dims": self.dims,
            "obj_R": self.obj_R.tolist(), "obj_c": self.obj_c.tolist(),
            "grip": None if self.grip is None else asdict(self.grip),
            "plane_R": self.plane_R.tolist(), "plane_c": self.plane_c.tolist(),
            "distractors": [{"R": R.tolist(), "c": c.tolist(), "half": h.tolist()} for R, c, h in self.distractors],
            "intrinsics": self.intrinsics.to_dict(), "corruption": asdict(self.corruption),
            "seed": int(self.seed), "colors": {k: list(v) for k, v in self.colors.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        arr = np.asarray
        return cls(
            kind=d["kind"], dims=dict(d["dims"]), obj_R=arr(d["obj_R"], float), obj_c=arr(d["obj_c"], float),
            grip=None if d["grip"] is None else GripParams(**d["grip"]),
            plane_R=arr(d["plane_R"], float), plane_c=arr(d["plane_c"], float),
            distractors=[(arr(b["R"], float), arr(b["c"], float), arr(b["half"], float)) for b in d["distractors"]],
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            corruption=CorruptionParams(**d["corruption"]), seed=int(d["seed"]),
            colors={k: tuple(v) for k, v in d.get("colors", {}).items()},
        )


@dataclass
class SceneRecord:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth_raw: np.ndarray
    depth_gt: np.ndarray
    mask_obj: np.ndarray
    mask_hand: np.ndarray
    keypoints: np.ndarray  # (21, 3)
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)


# objects and hands -------------------------------------------------------------

def make_object(kind: str, dims: dict, R=None, c=None):
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    c = np.zeros(3) if c is None else np.asarray(c, dtype=np.float64)
    if kind == "sphere":
        return Sphere(R, c, radius=dims["radius"])
    if kind == "cylinder":
        h = dims["height"] / 2
        return Frustum(R, c, r0=dims["radius"], r1=dims["radius"], z0=-h, z1=h)
    if kind == "capped_cone":
        h = dims["height"] / 2
        return Frustum(R, c, r0=dims["r_bottom"], r1=dims["r_top"], z0=-h, z1=h)
    if kind == "box":
        return Box(R, c, half=np.array([dims["half_x"], dims["half_y"], dims["height"] / 2]))
    if kind == "stem_glass":
        base_t = 0.006
        z = -(base_t + dims["stem_length"] + dims["bowl_height"]) / 2
        base = Frustum(R, c, r0=dims["base_radius"], r1=dims["base_radius"], z0=z, z1=z + base_t)
        z += base_t
        stem = Frustum(R, c, r0=dims["stem_radius"], r1=dims["stem_radius"], z0=z - 1e-4, z1=z + dims["stem_length"] + 1e-4)
        z += dims["stem_length"]
        bowl = Frustum(R, c, r0=dims["bowl_bottom"], r1=dims["bowl_top"], z0=z, z1=z + dims["bowl_height"])
        return Compound([bowl, stem, base], grip_part=0)
    raise SpecError(f"unknown object kind {kind!r}")


def max_width(obj) -> float:
    lo, hi = obj.grip_band
    hs = np.linspace(lo, hi, 9)
    phis = np.linspace(0, np.pi, 19)
    hh, pp = np.meshgrid(hs, phis)
    return float(np.max(obj.radius_at(hh, pp) + obj.radius_at(hh, pp + np.pi)))


def synth_hand(obj, grip: GripParams) -> np.ndarray:
    """21 keypoints (world frame) of a hand wrapped around ``obj``.

    Fingertips and distal joints are exact surface points at their heights;
    the palm side sits at ``grip.angle`` (object frame) and fingers wrap in
    the positive angular direction, the thumb in the negative one.
    """
    if max_width(obj) >= 0.12:
        raise SpecError("object too wide to be held in one hand")
    lo, hi = obj.grip_band
    zlo, zhi = _grip_part_range(obj)
    inset = 0.1 * (zhi - zlo)
    zlo, zhi = zlo + inset, zhi - inset
    h0 = lo + grip.height * (hi - lo)
    th = grip.angle

    def clip_h(h):
        return float(np.clip(h, zlo, zhi))

    def polar(h, phi, r):
        return np.array([r * np.cos(phi), r * np.sin(phi), h])

    def surf(h, phi):
        return polar(h, phi, float(obj.radius_at(h, phi)))

    rho0 = float(obj.radius_at(clip_h(h0), th))
    wrap = float(np.clip(0.075 / max(rho0, 1e-3), 0.6, 2.4))
    wrap_t = float(np.clip(0.055 / max(rho0, 1e-3), 0.5, 1.9))
    kp = np.zeros((21, 3))
    kp[0] = polar(h0 - 0.03, th, rho0 + grip.wrist_offset)
    ht = clip_h(h0 + 0.5 * grip.spread)
    kp[1] = polar(h0 - 0.015, th - 0.25, float(obj.radius_at(ht, th - 0.25)) + 0.045)
    kp[2] = polar(ht, th - 0.45, float(obj.radius_at(ht, th - 0.45)) + 0.02)
    kp[3] = surf(ht, th - 0.7 * wrap_t)
    kp[4] = surf(ht, th - wrap_t)
    for f in range(4):
        hf = clip_h(h0 + grip.spread * (1.5 - f))
        wf = wrap * (1 - 0.08 * f)
        r_mcp = float(obj.radius_at(hf, th)) + 0.022
        r_dip = float(obj.radius_at(hf, th + 0.68 * wf))
        base = 5 + 4 * f
        kp[base] = polar(hf, th, r_mcp)
        kp[base + 1] = polar(hf, th + 0.34 * wf, 0.5 * (r_mcp + r_dip))
        kp[base + 2] = surf(hf, th + 0.68 * wf)
        kp[base + 3] = surf(hf, th + wf)
    return kp @ obj.R.T + obj.c


def _grip_part_range(obj):
    part = obj.parts[obj.grip_part] if isinstance(obj, Compound) else obj
    return part.z_range


def hand_capsules(kp: np.ndarray, radius: float = HAND_RADIUS) -> list[Capsule]:
    return [Capsule(a=kp[i].copy(), b=kp[j].copy(), radius=radius) for i, j in BONES]


# scene sampling ------------------------------------------------------------------

def _rot_from_axis(up: np.ndarray, spin: float) -> np.ndarray:
    up = up / np.linalg.norm(up)
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = ref - (ref @ up) * up
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    c, s = np.cos(spin), np.sin(spin)
    return np.stack([c * e1 + s * e2, -s * e1 + c * e2, up], axis=1)


def sample_dims(kind: str, rng: np.random.Generator) -> dict:
    u = rng.uniform
    if kind == "sphere":
        return {"radius": u(0.035, 0.05)}
    if kind == "cylinder":
        return {"radius": u(0.028, 0.042), "height": u(0.10, 0.16)}
    if kind == "capped_cone":
        return {"r_bottom": u(0.024, 0.032), "r_top": u(0.036, 0.048), "height": u(0.10, 0.15)}
    if kind == "box":
        return {"half_x": u(0.025, 0.042), "half_y": u(0.025, 0.042), "height": u(0.10, 0.16)}
    if kind == "stem_glass":
        return {"base_radius": u(0.028, 0.035), "stem_radius": u(0.005, 0.007), "stem_length": u(0.045, 0.065),
                "bowl_bottom": u(0.018, 0.024), "bowl_top": u(0.036, 0.045), "bowl_height": u(0.07, 0.09)}
    raise SpecError(f"unknown object kind {kind!r}")


def camera_facing_angle(R: np.ndarray, c: np.ndarray) -> float:
    """Object-frame azimuth of the direction from the object toward the camera."""
    v = -np.asarray(c) @ R
    return float(np.arctan2(v[1], v[0]))


def sample_spec(rng: np.random.Generator, kind: str, intrinsics: CameraIntrinsics,
                corruption: CorruptionParams | None = None, seed: int = 0,
                grip_angle: float | None = None, with_hand: bool = True) -> SceneSpec:
    """Random scene; ``grip_angle`` is relative to the side facing away from the camera."""
    dims = sample_dims(kind, rng)
    c = np.array([rng.uniform(-0.035, 0.035), rng.uniform(-0.02, 0.025), rng.uniform(0.55, 0.75)])
    tilt = rng.normal(size=3) * np.array([1.0, 0.0, 1.0])
    tilt *= rng.uniform(0, np.tan(np.radians(10))) / max(np.linalg.norm(tilt), 1e-12)
    R = _rot_from_axis(np.array([0.0, -1.0, 0.0]) + tilt, rng.uniform(0, 2 * np.pi))
    if grip_angle is None:
        grip_angle = rng.uniform(-np.radians(100), np.radians(100))
    grip = GripParams(
        angle=camera_facing_angle(R, c) + np.pi + grip_angle,
        spread=rng.uniform(0.018, 0.024), wrist_offset=rng.uniform(0.06, 0.09), height=rng.uniform(0.2, 0.6),
    ) if with_hand else None
    a = rng.uniform(-0.2, 0.2)
    b = rng.uniform(-0.15, 0.15)
    n = np.array([np.sin(b), np.sin(a), -1.0])
    plane_R = _rot_from_axis(n, 0.0)
    plane_c = np.array([0.0, 0.0, rng.uniform(1.0, 1.2)])
    distractors = []
    for side in (-1, 1):
        half = rng.uniform(0.025, 0.06, size=3)
        bc = np.array([side * rng.uniform(0.2, 0.3), rng.uniform(-0.15, 0.15), plane_c[2] - 0.12 - half[2]])
        distractors.append((_rot_from_axis(np.array([0.0, 0.0, 1.0]), rng.uniform(0, np.pi)), bc, half))
    colors = {
        "check_a": tuple(rng.uniform(0.1, 0.9, 3)), "check_b": tuple(rng.uniform(0.1, 0.9, 3)),
        "box_0": tuple(rng.uniform(0.1, 0.9, 3)), "box_1": tuple(rng.uniform(0.1, 0.9, 3)),
        "tint": tuple(rng.uniform(0.7, 1.0, 3)),
        "skin": tuple(np.array([0.85, 0.64, 0.52]) * rng.uniform(0.7, 1.1)),
    }
    return SceneSpec(kind, dims, R, c, grip, plane_R, plane_c, distractors, intrinsics,
                     corruption or CorruptionParams(), int(seed), colors)


# rendering ---------------------------------------------------------------------

@dataclass
class World:
    """Posed solids of a scene, optionally after a rigid motion of object and hand."""

    obj: object
    keypoints: np.ndarray | None
    capsules: list
    plane: Plane
    boxes: list

    @property
    def background(self) -> list:
        return [self.plane, *self.boxes]


def build_world(spec: SceneSpec, motion: tuple[np.ndarray, np.ndarray] | None = None) -> World:
    obj = make_object(spec.kind, spec.dims, spec.obj_R, spec.obj_c)
    kp = synth_hand(obj, spec.grip) if spec.grip is not None else None
    if motion is not None:
        Rm, tm = (np.asarray(m, dtype=np.float64) for m in motion)
        obj = obj.moved(Rm, tm)
        if kp is not None:
            kp = kp @ Rm.T + tm
    caps = hand_capsules(kp) if kp is not None else []
    plane = Plane(spec.plane_R, spec.plane_c)
    boxes = [Box(R, c, half=h) for R, c, h in spec.distractors]
    return World(obj, kp, caps, plane, boxes)


def _nearest(casts):
    t = np.full(len(casts[0][0]), np.inf)
    n = np.zeros((len(t), 3))
    who = np.full(len(t), -1)
    for i, (ti, ni) in enumerate(casts):
        better = ti < t
        t = np.where(better, ti, t)
        n = np.where(better[:, None], ni, n)
        who = np.where(better, i, who)
    return t, n, who


def render_perfect(spec: SceneSpec, motion=None, world: World | None = None) -> dict:
    """Exact depth, masks, background-only depth and shaded RGB (float, 0..1)."""
    k = spec.intrinsics
    world = world or build_world(spec, motion)
    dirs = image_dirs(k).reshape(-1, 3)
    bg = [s.cast(dirs) for s in world.background]
    t_bg, n_bg, who_bg = _nearest(bg)
    t_obj, n_obj = world.obj.cast(dirs)
    if world.capsules:
        t_hand, n_hand, _ = _nearest([c.cast(dirs) for c in world.capsules])
    else:
        t_hand, n_hand = np.full(len(dirs), np.inf), np.zeros((len(dirs), 3))
    t, n, who = _nearest([(t_bg, n_bg), (t_obj, n_obj), (t_hand, n_hand)])
    # background as seen with the object removed
    t_no, n_no, who_no = _nearest([(t_bg, n_bg), (t_hand, n_hand)])
    shape = (k.height, k.width)

    def zdepth(tt):
        return np.where(np.isfinite(tt), tt * dirs[:, 2], 0.0).reshape(shape)

    depth = zdepth(t)
    obj_mask = (who == 1).reshape(shape)
    if obj_mask.sum() < 20:
        raise SpecError("degenerate spec: object not visible")

    cols = spec.colors or {}
    rng = np.random.default_rng(spec.seed + 7919)
    shade_no = 0.35 + 0.65 * np.abs(np.einsum("ij,ij->i", n_no, dirs))
    p_no = np.where(np.isfinite(t_no), t_no, 0)[:, None] * dirs
    uv = world.plane.coords(p_no)
    check = ((np.floor(uv[:, 0] / 0.04) + np.floor(uv[:, 1] / 0.04)) % 2).astype(bool)
    ca = np.array(cols.get("check_a", (0.8, 0.7, 0.5)))
    cb = np.array(cols.get("check_b", (0.3, 0.4, 0.6)))
    base = np.where(check[:, None], ca, cb)
    for i in range(len(world.boxes)):
        base = np.where((who_bg == i + 1)[:, None] & (who_no == 0)[:, None],
                        np.array(cols.get(f"box_{i}", (0.5, 0.5, 0.5))), base)
    base = np.where((who_no == 1)[:, None], np.array(cols.get("skin", (0.85, 0.64, 0.52))), base)
    rgb_no = base * shade_no[:, None]
    shade_obj = 0.35 + 0.65 * np.abs(np.einsum("ij,ij->i", n_obj, dirs))
    tint = np.array(cols.get("tint", (0.9, 0.95, 1.0)))
    glass = 0.35 * tint * shade_obj[:, None] + 0.65 * rgb_no + 0.15 * shade_obj[:, None] ** 8
    rgb = np.where((who == 1)[:, None], glass, rgb_no)
    rgb = np.clip(rgb + rng.normal(0, 0.015, rgb.shape), 0, 1).reshape(*shape, 3)
    return {
        "depth": depth, "mask_obj": obj_mask, "mask_hand": (who == 2).reshape(shape),
        "depth_bg": zdepth(t_no), "rgb": rgb, "world": world,
    }


def corrupt_depth(perfect: np.ndarray, mask: np.ndarray, params: CorruptionParams, seed: int,
                  background: np.ndarray | None = None) -> np.ndarray:
    """Per object pixel: drop, see through to the background, add noise, or keep."""
    out = np.array(perfect, dtype=np.float64)
    idx = np.nonzero(mask)
    n = len(idx[0])
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    noise = rng.standard_normal(n) * params.sigma
    vals = out[idx]
    bg = np.zeros(n) if background is None else np.asarray(background, dtype=np.float64)[idx]
    c1 = params.p_missing
    c2 = c1 + params.p_background
    c3 = c2 + params.p_noise
    vals = np.where(u < c1, 0.0,
                    np.where(u < c2, bg,
                             np.where(u < c3, np.maximum(vals + noise, 1e-4), vals)))
    out[idx] = vals
    return out


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_scene(spec: SceneSpec, motion=None) -> SceneRecord:
    r = render_perfect(spec, motion)
    perfect = _f32(r["depth"])
    raw = _f32(corrupt_depth(perfect, r["mask_obj"], spec.corruption, spec.seed, _f32(r["depth_bg"])))
    rgb = np.round(r["rgb"] * 255).astype(np.uint8)
    kp = r["world"].keypoints
    kp = np.zeros((21, 3)) if kp is None else kp
    return SceneRecord(rgb, raw, perfect, r["mask_obj"], r["mask_hand"], kp, spec.intrinsics,
                       {"kind": spec.kind, "seed": int(spec.seed)})


def scene_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def _pick_kind(rng: np.random.Generator, kinds, weights) -> str:
    p = None if weights is None else np.asarray(weights, dtype=np.float64) / np.sum(weights)
    return kinds[int(rng.choice(len(kinds), p=p))]


def scene_kind(master: int, index: int, kinds=OBJECT_KINDS, weights=None) -> str:
    """Object kind of the index-th scene without rendering it."""
    return _pick_kind(np.random.default_rng(scene_seed(master, index)), kinds, weights)


def random_scene(master: int, index: int, intrinsics: CameraIntrinsics,
                 kinds=OBJECT_KINDS, weights=None, corruption: CorruptionParams | None = None) -> tuple[SceneSpec, SceneRecord]:
    """The index-th scene of a dataset; a pure function of (master, index)."""
    seed = scene_seed(master, index)
    rng = np.random.default_rng(seed)
    kind = _pick_kind(rng, kinds, weights)
    for attempt in range(20):
        spec = sample_spec(rng, kind, intrinsics, corruption, seed)
        try:
            return spec, generate_scene(spec)
        except SpecError:
            log.debug("scene %d attempt %d rejected", index, attempt)
    raise SpecError(f"could not sample a valid scene for index {index}")


def split_assignment(n: int, seed: int) -> list[str]:
    """7:2:1 train/val/test labels, floor for train and val."""
    n_train, n_val = (7 * n) // 10, (2 * n) // 10
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 7021])).permutation(n)
    out = np.empty(n, dtype=object)
    out[perm] = labels
    return list(out)


SCENE_FILES = ("rgb.ppm", "depth_raw.rvt", "depth_gt.rvt", "mask_obj.rvt", "mask_hand.rvt", "keypoints.json")


def write_scene(scene_dir: Path, spec: SceneSpec, rec: SceneRecord) -> None:
    scene_dir.mkdir(parents=True, exist_ok=True)
    io.write_ppm(scene_dir / "rgb.ppm", rec.rgb)
    io.write_tensor(scene_dir / "depth_raw.rvt", rec.depth_raw.astype(np.float32))
    io.write_tensor(scene_dir / "depth_gt.rvt", rec.depth_gt.astype(np.float32))
    io.write_tensor(scene_dir / "mask_obj.rvt", rec.mask_obj.astype(np.uint8))
    io.write_tensor(scene_dir / "mask_hand.rvt", rec.mask_hand.astype(np.uint8))
    io.write_json(scene_dir / "keypoints.json", {"keypoints": rec.keypoints.tolist(), "spec": spec.to_dict()})


def read_scene(scene_dir: str | Path, intrinsics: CameraIntrinsics | None = None) -> SceneRecord:
    d = Path(scene_dir)
    meta = io.read_json(d / "keypoints.json")
    spec = meta.get("spec", {})
    k = intrinsics or CameraIntrinsics.from_dict(spec["intrinsics"])
    return SceneRecord(
        rgb=io.read_ppm(d / "rgb.ppm"),
        depth_raw=io.read_tensor(d / "depth_raw.rvt").astype(np.float64),
        depth_gt=io.read_tensor(d / "depth_gt.rvt").astype(np.float64),
        mask_obj=io.read_tensor(d / "mask_obj.rvt").astype(bool),
        mask_hand=io.read_tensor(d / "mask_hand.rvt").astype(bool),
        keypoints=np.asarray(meta["keypoints"], dtype=np.float64),
        intrinsics=k,
        meta={"kind": spec.get("kind"), "seed": spec.get("seed")},
    )


def generate_dataset(out_dir: str | Path, n_scenes: int, seed: int = 0, width: int = 64, height: int = 64,
                     kinds=OBJECT_KINDS, weights=None, corruption: CorruptionParams | None = None,
                     extra_manifest: dict | None = None, model_config=None, workers: int = 1) -> dict:
    """Write ``scenes/NNNNNN/*`` and ``manifest.json``; returns the manifest."""
    from .network import ModelConfig

    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out = Path(out_dir)
    k = CameraIntrinsics.default(width, height)
    corruption = corruption or CorruptionParams()
    model_config = model_config or ModelConfig()
    splits = split_assignment(n_scenes, seed)
    jobs = [(out, seed, i, k, tuple(kinds), weights, corruption, model_config) for i in range(n_scenes)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_emit_scene, jobs))
    else:
        rows = [_emit_scene(j) for j in jobs]
    entries = [{**row, "split": s} for row, s in zip(rows, splits)]
    manifest = {
        "n_scenes": n_scenes, "seed": int(seed), "intrinsics": k.to_dict(), "kinds": list(kinds),
        "unknown_kinds": list(UNKNOWN_KINDS),
        "corruption": {**asdict(corruption), "note": "assumed sensor statistics, not measured"},
        "split_counts": {s: splits.count(s) for s in ("train", "val", "test")},
        "scenes": entries, "files": list(SCENE_FILES),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    io.write_json(out / "manifest.json", manifest)
    return manifest


def _emit_scene(job) -> dict:
    from .training import supervision_stats

    out, seed, i, k, kinds, weights, corruption, model_config = job
    name = f"{i:06d}"
    try:
        spec, rec = random_scene(seed, i, k, kinds, weights, corruption)
        write_scene(out / "scenes" / name, spec, rec)
    except OSError as e:
        raise OSError(f"scene {i}: {e}") from e
    n_sup, n_ray = supervision_stats(rec, model_config)
    return {
        "index": i, "dir": f"scenes/{name}", "kind": spec.kind, "seed": spec.seed,
        "unknown_category": spec.kind in UNKNOWN_KINDS, "mask_pixels": int(rec.mask_obj.sum()),
        "supervised_fraction": n_sup / max(n_ray, 1),
    }


class Dataset:
    """Lazy view over a generated dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = io.read_json(self.root / "manifest.json")
        self.intrinsics = CameraIntrinsics.from_dict(self.manifest["intrinsics"])

    def entries(self, split: str | None = None, unknown: bool | None = None) -> list[dict]:
        out = self.manifest["scenes"]
        if split is not None:
            out = [e for e in out if e["split"] == split]
        if unknown is not None:
            out = [e for e in out if e["unknown_category"] == unknown]
        return out

    def load(self, entry: dict) -> SceneRecord:
        return read_scene(self.root / entry["dir"], self.intrinsics)
