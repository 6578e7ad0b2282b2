"""Simulated human-to-robot handover with a free-flying parallel-jaw gripper.

Three phases: wait until the restored object depth is stable, then pick a
grasp and approach its pre-grasp while tracking the hand rigidly, then
execute the grasp open-loop and score it against the true geometry.
All poses live in the camera frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import datagen
from .datagen import CorruptionParams, SceneSpec
from .geometry import CameraIntrinsics, backproject
from .network import Model, OracleScorer, restore
from .primitives import Capsule, chord, segment_distance

log = logging.getLogger(__name__)

MAX_WIDTH = 0.10
PREGRASP_BACK = 0.10
ADVANCE = 0.05
WIDTH_TOL = 0.02
PALM_RADIUS = 0.012
HAND_MARGIN = 0.004
PHASES = ("WaitObserve", "ApproachReact", "GraspRetrieve", "Done", "Failed")
_NEXT = {"WaitObserve": {"WaitObserve", "ApproachReact", "Failed"},
         "ApproachReact": {"ApproachReact", "GraspRetrieve", "Failed"},
         "GraspRetrieve": {"Done", "Failed"}}


class HandoverError(ValueError):
    pass


def _orthonormal(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return R.shape == (3, 3) and np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol


@dataclass(frozen=True)
class Grasp:
    """Gripper pose (x = closing axis, z = approach), opening width and quality."""

    rotation: np.ndarray
    translation: np.ndarray
    width: float
    score: float

    def __post_init__(self) -> None:
        if not _orthonormal(self.rotation):
            raise HandoverError("grasp rotation is not a proper rotation")
        if not 0 < self.width <= MAX_WIDTH:
            raise HandoverError(f"grasp width {self.width} outside (0, {MAX_WIDTH}]")

    @property
    def axis(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def approach(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def closure_center(self) -> np.ndarray:
        return self.translation + ADVANCE * self.approach

    def pregrasp(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rotation.copy(), self.translation - PREGRASP_BACK * self.approach

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": float(self.width), "score": float(self.score)}


# grasp sampling ----------------------------------------------------------------

def estimate_normals(points: np.ndarray, k: int = 12) -> np.ndarray:
    """PCA normals over k nearest neighbors, oriented away from the centroid."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    n = np.linalg.eigh(cov)[1][:, :, 0]
    out = pts - pts.mean(axis=0)
    return np.where((np.einsum("ij,ij->i", n, out) < 0)[:, None], -n, n)


def view_normals(depth: np.ndarray, mask: np.ndarray, k: CameraIntrinsics, pca_k: int = 12):
    """Object points and normals from one depth view.

    Interior points get PCA normals. Points on the mask boundary get the
    occluding-contour normal instead: the outward 2-D mask normal lifted to
    3-D and made perpendicular to the viewing ray, which is where the jaws
    of a gripper approaching from the camera side make contact.
    """
    mask = np.asarray(mask, dtype=bool)
    valid = mask & (np.asarray(depth) > 0)
    pts, pix = backproject(np.where(valid, depth, 0.0), k)
    if len(pts) == 0:
        return pts, np.zeros((0, 3))
    nrm = estimate_normals(pts, pca_k) if len(pts) >= 3 else np.zeros_like(pts)
    interior = ndimage.binary_erosion(mask, border_value=0)
    smooth = ndimage.gaussian_filter(mask.astype(np.float64), 1.0)
    gv, gu = np.gradient(smooth)
    u, v = pix[:, 0], pix[:, 1]
    edge = ~interior[v, u]
    z = pts[:, 2]
    t = np.stack([-gu[v, u] * z / k.fx, -gv[v, u] * z / k.fy, np.zeros(len(z))], axis=1)
    ray = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    t -= np.einsum("ij,ij->i", t, ray)[:, None] * ray
    tn = np.linalg.norm(t, axis=1)
    use = edge & (tn > 1e-12)
    nrm[use] = t[use] / tn[use, None]
    return pts, nrm


def grasp_from_contacts(p1: np.ndarray, p2: np.ndarray, score: float, view=None) -> Grasp:
    """Grasp closing on the segment p1-p2, approaching along ``view`` made perpendicular to it."""
    d = p2 - p1
    w = float(np.linalg.norm(d))
    x = d / w
    mid = 0.5 * (p1 + p2)
    v = mid / np.linalg.norm(mid) if view is None else np.asarray(view, dtype=np.float64)
    z = v - (v @ x) * x
    if np.linalg.norm(z) < 1e-9:
        z = np.cross(x, [1.0, 0.0, 0.0] if abs(x[0]) < 0.9 else [0.0, 1.0, 0.0])
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Grasp(R, mid - ADVANCE * z, min(w, MAX_WIDTH), float(score))


def sample_grasps(points: np.ndarray, n: int, seed: int = 0, max_width: float = MAX_WIDTH,
                  max_angle_deg: float = 45.0, budget: int = 20000, normals: np.ndarray | None = None,
                  viewpoint=None) -> list[Grasp]:
    """Antipodal grasps from a point cloud, best first.

    A pair (i, j) qualifies when both normals lie within ``max_angle_deg`` of
    the closing axis; its score is antipodality * (1 - width / max_width).
    Grasps approach from ``viewpoint`` (default: the camera origin).
    """
    if n <= 0:
        return []
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 10:
        raise HandoverError("need at least 10 object points")
    nrm = estimate_normals(pts) if normals is None else np.asarray(normals, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4242]))
    i = rng.integers(0, len(pts), budget)
    j = rng.integers(0, len(pts), budget)
    d = pts[j] - pts[i]
    w = np.linalg.norm(d, axis=1)
    ok = (w > 1e-3) & (w <= max_width)
    a = d / np.where(w > 0, w, 1.0)[:, None]
    anti = np.minimum(-np.einsum("ij,ij->i", nrm[i], a), np.einsum("ij,ij->i", nrm[j], a))
    ok &= anti >= np.cos(np.radians(max_angle_deg))
    cand = np.flatnonzero(ok)
    if len(cand) == 0:
        return []
    score = anti[cand] * (1 - w[cand] / max_width)
    # unordered pair dedup, keep the first draw
    key = np.minimum(i[cand], j[cand]) * len(pts) + np.maximum(i[cand], j[cand])
    _, first = np.unique(key, return_index=True)
    first = np.sort(first)
    cand, score = cand[first], score[first]
    order = np.lexsort((cand, -score))[:n]
    eye = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    out = []
    for c, s in zip(cand[order], score[order]):
        p1, p2 = pts[i[c]], pts[j[c]]
        v = 0.5 * (p1 + p2) - eye
        out.append(grasp_from_contacts(p1, p2, float(np.clip(s, 0, 1)), v / np.linalg.norm(v)))
    return out


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1) > 1e-6:
        raise HandoverError(f"{name} must be a unit 3-vector")
    return v


def rescore(g: Grasp, v_r2h, v_u2d, w_s: float = 1.0, w_r2h: float = 0.4, w_u2d: float = 0.2) -> float:
    v1 = _unit(v_r2h, "v_r2h")
    v2 = _unit(v_u2d, "v_u2d")
    R = g.rotation
    return float(w_s * g.score + w_r2h * v1 @ (R @ v1) + w_u2d * v2 @ (R @ v2))


# collisions --------------------------------------------------------------------

def _segment_hits_capsules(p0, p1, capsules, clearance: float) -> bool:
    return any(segment_distance(p0, p1, c.a, c.b) <= c.radius + clearance for c in capsules)


def _segment_hits_solids(p0, p1, solids, step: float = 0.002) -> bool:
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    pts = p0 + np.linspace(0, 1, n)[:, None] * (p1 - p0)
    return any(np.any(s.inside(pts)) for s in solids)


def jaw_opening(g: Grasp) -> float:
    return g.width + WIDTH_TOL


def grasp_collides(g: Grasp, capsules: list[Capsule], background: list) -> bool:
    """Closing region or approach sweep touching the hand, or palm path into the background."""
    R_pre, p_pre = g.pregrasp()
    c = g.closure_center
    h = 0.5 * jaw_opening(g) * g.axis
    if _segment_hits_capsules(c - h, c + h, capsules, HAND_MARGIN):
        return True
    back = c - (PREGRASP_BACK + ADVANCE) * g.approach
    for s in (-h, h):
        if _segment_hits_capsules(back + s, c + s, capsules, HAND_MARGIN):
            return True
    if _segment_hits_capsules(p_pre, g.translation, capsules, PALM_RADIUS):
        return True
    return _segment_hits_solids(p_pre, g.translation, background)


def select_grasp(grasps: list[Grasp], capsules: list[Capsule], background: list, v_r2h, v_u2d):
    """Best collision-free grasp by the rescored value, or None."""
    if not grasps:
        raise HandoverError("empty grasp candidate list")
    best = None
    for idx, g in enumerate(grasps):
        if grasp_collides(g, capsules, background):
            continue
        key = (rescore(g, v_r2h, v_u2d), g.score, -idx)
        if best is None or key > best[0]:
            best = (key, g)
    if best is None:
        return None
    g = best[1]
    return g, g.pregrasp()


# hand tracking -----------------------------------------------------------------

def estimate_hand_motion(X_i: np.ndarray, X_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid motion taking the initial keypoints to the current ones, wrist-centered."""
    A = np.asarray(X_i, dtype=np.float64)
    B = np.asarray(X_c, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise HandoverError("keypoint sets must be matching (N, 3) arrays")
    T = B[0] - A[0]
    A0 = A - A[0]
    B0 = B - B[0]
    sa = np.linalg.svd(A0, compute_uv=False)
    if sa[0] < 1e-9 or sa[1] < 1e-9 * max(sa[0], 1.0):
        raise HandoverError("degenerate hand configuration")
    U, _, Vt = np.linalg.svd(A0.T @ B0)
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, -1] *= -1
        R = V @ U.T
    return R, T


def update_pregrasp(pose: tuple[np.ndarray, np.ndarray], R: np.ndarray, T: np.ndarray, wrist0: np.ndarray):
    """Initial pre-grasp (R_pre, p_pre) moved rigidly with the hand about the initial wrist."""
    R_pre, p_pre = pose
    return R @ R_pre, R @ (p_pre - wrist0) + wrist0 + T


# scenarios ---------------------------------------------------------------------

@dataclass
class ScenarioScript:
    name: str
    spec: SceneSpec
    track: list = field(default_factory=list)  # per tick (R, t), world map p -> R p + t; last entry holds
    v_r2h: tuple = (0.0, 0.0, 1.0)
    v_u2d: tuple = (0.0, 1.0, 0.0)
    tick_rate: float = 10.0
    max_speed: float = 0.02
    max_turn_deg: float = 4.0
    tick_budget: int = 150
    n_grasps: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        _unit(self.v_r2h, "v_r2h")
        _unit(self.v_u2d, "v_u2d")

    def motion(self, tick: int):
        if not self.track:
            return None
        R, t = self.track[min(tick, len(self.track) - 1)]
        return np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("spec", "track")}
        d["v_r2h"], d["v_u2d"] = list(self.v_r2h), list(self.v_u2d)
        d["spec"] = self.spec.to_dict()
        d["track"] = [{"R": np.asarray(R).tolist(), "t": np.asarray(t).tolist()} for R, t in self.track]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        d = dict(d)
        d["spec"] = SceneSpec.from_dict(d["spec"])
        d["track"] = [(np.asarray(m["R"], dtype=np.float64), np.asarray(m["t"], dtype=np.float64)) for m in d["track"]]
        d["v_r2h"], d["v_u2d"] = tuple(d["v_r2h"]), tuple(d["v_u2d"])
        return cls(**d)


def linear_track(n_ticks: int, start: int, end: int, rotvec, translation, pivot) -> list:
    """Rigid motion ramping linearly between ticks ``start`` and ``end`` about ``pivot``."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    pivot = np.asarray(pivot, dtype=np.float64)
    out = []
    for tick in range(n_ticks):
        f = float(np.clip((tick - start) / max(end - start, 1), 0.0, 1.0))
        R = Rotation.from_rotvec(f * rotvec).as_matrix()
        out.append((R, pivot - R @ pivot + f * translation))
    return out


GRIP_ANGLES_DEG = (-90.0, -55.0, -20.0, 20.0, 55.0, 90.0)


def default_scenarios(seed: int = 0, width: int = 128, height: int = 128,
                      corruption: CorruptionParams | None = None) -> list[ScenarioScript]:
    """5 object families x 6 grips; two scenarios move the hand mid-approach."""
    k = CameraIntrinsics.default(width, height)
    corruption = corruption or CorruptionParams()
    out = []
    for fi, kind in enumerate(datagen.OBJECT_KINDS):
        for gi, ang in enumerate(GRIP_ANGLES_DEG):
            idx = fi * len(GRIP_ANGLES_DEG) + gi
            sseed = datagen.scene_seed(seed, 100000 + idx)
            rng = np.random.default_rng(sseed)
            for _ in range(50):
                spec = datagen.sample_spec(rng, kind, k, corruption, sseed, grip_angle=np.radians(ang))
                if datagen.max_width(datagen.make_object(spec.kind, spec.dims)) > 0.09:
                    continue
                try:
                    datagen.render_perfect(spec)
                    break
                except datagen.SpecError:
                    continue
            else:
                raise HandoverError(f"could not build scenario {idx}")
            track = []
            if idx in (2, 17):
                wrist = datagen.build_world(spec).keypoints[0]
                if idx == 2:
                    track = linear_track(40, 10, 20, np.zeros(3), [0.05, 0.0, 0.0], wrist)
                else:
                    track = linear_track(40, 10, 22, [0.0, np.radians(15), 0.0], [-0.02, -0.02, 0.0], wrist)
            out.append(ScenarioScript(f"{kind}_{gi}", spec, track, seed=sseed))
    return out


# state machine -----------------------------------------------------------------

@dataclass
class HandoverState:
    phase: str = "WaitObserve"
    gripper_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    gripper_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grasp: Grasp | None = None
    pregrasp0: tuple | None = None
    X_i: np.ndarray | None = None
    X_c: np.ndarray | None = None
    tick: int = 0
    stable: int = 0
    last_depth: np.ndarray | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise HandoverError(f"unknown phase {self.phase!r}")


def _transition(state: HandoverState, **changes) -> HandoverState:
    new = replace(state, **changes)
    if new.phase != state.phase and new.phase not in _NEXT.get(state.phase, set()):
        raise HandoverError(f"illegal transition {state.phase} -> {new.phase}")
    return new


def _move_toward(R, p, R_t, p_t, max_speed, max_turn):
    d = p_t - p
    dist = float(np.linalg.norm(d))
    p_new = p_t.copy() if dist <= max_speed else p + d * (max_speed / dist)
    rv = Rotation.from_matrix(R_t @ R.T).as_rotvec()
    ang = float(np.linalg.norm(rv))
    if ang > max_turn:
        rv *= max_turn / ang
    R_new = Rotation.from_rotvec(rv).as_matrix() @ R
    return R_new, p_new


def pose_error(R, p, R_t, p_t) -> tuple[float, float]:
    ang = float(np.linalg.norm(Rotation.from_matrix(R_t @ R.T).as_rotvec()))
    return float(np.linalg.norm(p_t - p)), np.degrees(ang)


def object_points(depth: np.ndarray, mask: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    d = np.where(mask, depth, 0.0)
    return backproject(d, k)[0]


def closure_outcome(R: np.ndarray, p: np.ndarray, width: float, world) -> tuple[bool, str]:
    """Score a closure with the gripper palm at (R, p) against the true world."""
    x, z = R[:, 0], R[:, 2]
    c = p + (PREGRASP_BACK + ADVANCE) * z
    half = 0.5 * (width + WIDTH_TOL)
    span = chord(world.obj, c, x, half + 0.03)
    if span is None:
        return False, "geometric miss"
    if span[0] < -half or span[1] > half:
        return False, "object wider than the jaw opening"
    if _segment_hits_capsules(c - half * x, c + half * x, world.capsules, 0.0):
        return False, "hand contact"
    return True, "ok"


def step(state: HandoverState, script: ScenarioScript, backend) -> HandoverState:
    """Advance one tick. ``backend(scene_record) -> restored depth``."""
    if state.phase in ("Done", "Failed"):
        return state
    tick = state.tick
    if tick >= script.tick_budget:
        return _transition(state, phase="Failed", reason="timeout")
    motion = script.motion(tick)
    if state.phase == "WaitObserve":
        rec = datagen.generate_scene(script.spec, motion)
        depth = np.asarray(backend(rec), dtype=np.float64)
        mask = rec.mask_obj
        stable = state.stable
        if state.last_depth is not None:
            change = float(np.sqrt(np.mean((depth[mask] - state.last_depth[mask]) ** 2)))
            stable = stable + 1 if change < 0.005 else 0
        if stable < 3:
            return _transition(state, tick=tick + 1, stable=stable, last_depth=depth)
        pts, nrm = view_normals(depth, mask, rec.intrinsics)
        grasps = sample_grasps(pts, script.n_grasps, seed=script.seed, normals=nrm) if len(pts) >= 10 else []
        world = datagen.build_world(script.spec, motion)
        chosen = select_grasp(grasps, datagen.hand_capsules(rec.keypoints), world.background,
                              script.v_r2h, script.v_u2d) if grasps else None
        if chosen is None:
            return _transition(state, phase="Failed", tick=tick + 1, reason="no feasible grasp", last_depth=depth)
        g, pre = chosen
        return _transition(state, phase="ApproachReact", tick=tick + 1, stable=stable, last_depth=None,
                           grasp=g, pregrasp0=pre, X_i=rec.keypoints.copy(), X_c=rec.keypoints.copy())
    world = datagen.build_world(script.spec, motion)
    if state.phase == "ApproachReact":
        X_c = world.keypoints
        R, T = estimate_hand_motion(state.X_i, X_c)
        R_t, p_t = update_pregrasp(state.pregrasp0, R, T, state.X_i[0])
        R_g, p_g = _move_toward(state.gripper_R, state.gripper_p, R_t, p_t, script.max_speed,
                                np.radians(script.max_turn_deg))
        dp, da = pose_error(R_g, p_g, R_t, p_t)
        phase = "GraspRetrieve" if dp < 0.005 and da < 2.0 else "ApproachReact"
        return _transition(state, phase=phase, tick=tick + 1, gripper_R=R_g, gripper_p=p_g, X_c=X_c.copy())
    ok, why = closure_outcome(state.gripper_R, state.gripper_p, state.grasp.width, world)
    return _transition(state, phase="Done" if ok else "Failed", tick=tick + 1, reason=why)


def _tick_record(state: HandoverState) -> dict:
    return {
        "tick": state.tick, "phase": state.phase, "reason": state.reason,
        "gripper": {"R": state.gripper_R.tolist(), "p": state.gripper_p.tolist()},
        "keypoints": None if state.X_c is None else state.X_c.tolist(),
        "grasp": None if state.grasp is None else state.grasp.to_dict(),
    }


def run_scenario(script: ScenarioScript, backend, dump=None) -> dict:
    state = HandoverState()
    while state.phase not in ("Done", "Failed"):
        state = step(state, script, backend)
        if dump is not None:
            dump.write(json.dumps(_tick_record(state), sort_keys=True) + "\n")
    return {"name": script.name, "kind": script.spec.kind, "success": state.phase == "Done",
            "reason": state.reason, "ticks": state.tick}


# backends ------------------------------------------------------------------------

def oracle_backend(rec) -> np.ndarray:
    return restore(OracleScorer(rec.depth_gt), rec)


def passthrough_backend(rec) -> np.ndarray:
    return np.array(rec.depth_raw, dtype=np.float64)


def model_backend(model: Model):
    def run(rec):
        return restore(model, rec)
    return run


# benchmark -----------------------------------------------------------------------

THRESHOLDS = (0.5, 0.8, 1.0)


def summarize(results: list[dict]) -> dict:
    """Per-object attempts/successes, overall rate and objects-at-or-above-threshold counts."""
    per = {}
    for r in results:
        e = per.setdefault(r["kind"], {"attempts": 0, "successes": 0})
        e["attempts"] += 1
        e["successes"] += int(r["success"])
    for e in per.values():
        e["rate"] = e["successes"] / e["attempts"]
    n = len(results)
    total = sum(int(r["success"]) for r in results)
    return {
        "objects": per, "attempts": n, "successes": total, "rate": total / n if n else 0.0,
        "delta": {f"{t:.1f}": sum(e["rate"] >= t for e in per.values()) for t in THRESHOLDS},
    }


def run_benchmark(scripts: list[ScenarioScript], backend, dump_dir=None) -> dict:
    if not scripts:
        raise HandoverError("no scenarios")
    results = []
    for s in scripts:
        if dump_dir is not None:
            with open(f"{dump_dir}/{s.name}.jsonl", "w") as f:
                results.append(run_scenario(s, backend, f))
        else:
            results.append(run_scenario(s, backend))
    out = summarize(results)
    out["scenarios"] = results
    return out


def format_report(summary: dict, label: str) -> str:
    rows = [f"{'object':<14}{'attempts':>9}{'success':>9}{'rate':>8}"]
    for kind, e in summary["objects"].items():
        rows.append(f"{kind:<14}{e['attempts']:>9}{e['successes']:>9}{100 * e['rate']:>7.1f}%")
    d = summary["delta"]
    rows.append(f"{label}: {summary['successes']}/{summary['attempts']} = {100 * summary['rate']:.1f}%  "
                f"d0.5={d['0.5']} d0.8={d['0.8']} d1.0={d['1.0']}")
    return "\n".join(rows)
