"""Supervision targets, the weighted three-term loss, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CameraIntrinsics
from .network import (Model, ModelConfig, ScenePrep, backward, forward, prepare_record, ray_depths,
                      select_pairs)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Diverged(TrainingError):
    def __init__(self, message: str, last_good: Model | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class LossWeights:
    w_depth: float = 200.0
    w_prob: float = 10.0
    w_norm: float = 0.5

    def __post_init__(self) -> None:
        if min(self.w_depth, self.w_prob, self.w_norm) < 0:
            raise ValueError("loss weights must be non-negative")


# targets ---------------------------------------------------------------------

@dataclass
class SupervisionTarget:
    rays: np.ndarray  # (S,) supervised ray indices
    pair: np.ndarray  # (S,) index of the containing pair
    offset: np.ndarray  # (S,) meters from entry to the true surface
    depth: np.ndarray  # (S,) true z-depth
    n_excluded: int
    normal_pixels: np.ndarray  # (M,) ray indices whose normal is supervised
    normals: np.ndarray  # (M, 3) true normals there
    ray_image: np.ndarray = field(repr=False)  # (H, W) ray index or -1


def containing_pairs(prep: ScenePrep, t_true: np.ndarray) -> np.ndarray:
    """First pair of each ray whose [t_in, t_out] contains t_true, else -1."""
    out = np.full(len(prep.ray_count), -1, dtype=np.int64)
    if len(prep.pair_ray) == 0:
        return out
    t = t_true[prep.pair_ray]
    hit = (prep.t_in <= t) & (t <= prep.t_out)
    idx = np.flatnonzero(hit)
    rays = prep.pair_ray[idx]
    # pairs are ray-grouped in increasing t, so the first hit per ray wins
    first = np.unique(rays, return_index=True)[1]
    out[rays[first]] = idx[first]
    return out


def build_targets(prep: ScenePrep, perfect_depth: np.ndarray, k: CameraIntrinsics) -> SupervisionTarget:
    u, v = prep.ray_pixels[:, 0], prep.ray_pixels[:, 1]
    d_true = np.asarray(perfect_depth, dtype=np.float64)[v, u]
    t_true = d_true / prep.ray_dirs[:, 2]
    pair = containing_pairs(prep, t_true)
    sup = np.flatnonzero(pair >= 0)
    j = pair[sup]
    ray_image = np.full(prep.shape, -1, dtype=np.int64)
    ray_image[v, u] = np.arange(len(u))
    sup_img = np.zeros(prep.shape, dtype=bool)
    sup_img[v[sup], u[sup]] = True
    gt_n, gt_valid = normals_from_depth(np.where(sup_img, perfect_depth, 0.0), k, sup_img)
    nv, nu = np.nonzero(gt_valid)
    return SupervisionTarget(
        rays=sup, pair=j, offset=t_true[sup] - prep.t_in[j], depth=d_true[sup],
        n_excluded=int(len(u) - len(sup)), normal_pixels=ray_image[nv, nu], normals=gt_n[nv, nu],
        ray_image=ray_image,
    )


def supervision_stats(scene, config: ModelConfig | None = None) -> tuple[int, int]:
    """(supervised rays, object-mask rays) for a scene record."""
    prep = prepare_record(scene, config or ModelConfig())
    t = build_targets(prep, scene.depth_gt, scene.intrinsics)
    return len(t.rays), len(prep.ray_pixels)


# losses ----------------------------------------------------------------------

def loss_depth(pred: np.ndarray, true: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.size == 0:
        raise TrainingError("no supervision")
    diff = pred - np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_prob(logits_per_ray: list[np.ndarray], target: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean per-ray softmax cross-entropy; returns the loss and per-ray logit gradients."""
    if len(logits_per_ray) == 0:
        raise TrainingError("no supervision")
    total, grads = 0.0, []
    n = len(logits_per_ray)
    for z, t in zip(logits_per_ray, target):
        z = np.asarray(z, dtype=np.float64)
        if not 0 <= t < len(z):
            raise TrainingError(f"target index {t} out of range for {len(z)} pairs")
        m = z.max()
        e = np.exp(z - m)
        s = e.sum()
        total += m + math.log(s) - z[t]
        g = e / s
        g[t] -= 1.0
        grads.append(g / n)
    return total / n, grads


def _segment_softmax_ce(prep: ScenePrep, logit: np.ndarray, rays: np.ndarray, pair: np.ndarray):
    """Vectorised loss_prob over the supervised rays of a prepared scene."""
    first = prep.ray_first
    count = prep.ray_count
    has = count > 0
    seg_first = first[has]
    mx = np.maximum.reduceat(logit, seg_first)
    seg_of_ray = np.full(len(count), -1)
    seg_of_ray[has] = np.arange(has.sum())
    pair_seg = seg_of_ray[prep.pair_ray]
    e = np.exp(logit - mx[pair_seg])
    s = np.add.reduceat(e, seg_first)
    lse = mx + np.log(s)
    rs = seg_of_ray[rays]
    n = len(rays)
    loss = float(np.mean(lse[rs] - logit[pair]))
    p = e / s[pair_seg]
    supervised = np.zeros(len(count), dtype=bool)
    supervised[rays] = True
    g = np.where(supervised[prep.pair_ray], p, 0.0)
    g[pair] -= 1.0
    return loss, g / n


def _view_q(k: CameraIntrinsics, shape) -> np.ndarray:
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w]
    return np.stack([(uu + 0.5 - k.cx) / k.fx, (vv + 0.5 - k.cy) / k.fy, np.ones((h, w))], axis=-1)


def _normal_parts(depth, k, mask):
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    avail = depth > 0
    valid = np.zeros((h, w), dtype=bool)
    inner = (np.asarray(mask, dtype=bool)[1:-1, 1:-1] & avail[1:-1, 2:] & avail[1:-1, :-2]
             & avail[2:, 1:-1] & avail[:-2, 1:-1])
    valid[1:-1, 1:-1] = inner
    v, u = np.nonzero(valid)
    q = _view_q(k, (h, w))
    p = depth[..., None] * q
    a = p[v, u + 1] - p[v, u - 1]
    b = p[v + 1, u] - p[v - 1, u]
    m = np.cross(a, b)
    norm = np.linalg.norm(m, axis=1)
    # normal faces the camera
    sgn = np.where(np.einsum("ij,ij->i", m, q[v, u]) > 0, -1.0, 1.0)
    return v, u, q, a, b, m, norm, sgn, valid


def normals_from_depth(depth: np.ndarray, k: CameraIntrinsics, mask: np.ndarray):
    """Unit normals from central differences of back-projected 4-neighbors.

    Returns (normals (H, W, 3), valid (H, W)); pixels without all four
    neighbors (or with a degenerate cross product) are skipped.
    """
    v, u, q, a, b, m, norm, sgn, valid = _normal_parts(depth, k, mask)
    ok = norm > 0
    valid[v[~ok], u[~ok]] = False
    out = np.zeros(valid.shape + (3,))
    out[v[ok], u[ok]] = sgn[ok, None] * m[ok] / norm[ok, None]
    return out, valid


def normals_backward(depth: np.ndarray, k: CameraIntrinsics, mask: np.ndarray, d_normals: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the depth image given gradients on the output normals."""
    v, u, q, a, b, m, norm, sgn, _ = _normal_parts(depth, k, mask)
    ok = norm > 0
    v, u, a, b, m, norm, sgn = v[ok], u[ok], a[ok], b[ok], m[ok], norm[ok], sgn[ok]
    dn = d_normals[v, u]
    nh = m / norm[:, None]
    dm = sgn[:, None] * (dn - nh * np.einsum("ij,ij->i", nh, dn)[:, None]) / norm[:, None]
    da = np.cross(b, dm)
    db = np.cross(dm, a)
    out = np.zeros(depth.shape)
    np.add.at(out, (v, u + 1), np.einsum("ij,ij->i", da, q[v, u + 1]))
    np.add.at(out, (v, u - 1), -np.einsum("ij,ij->i", da, q[v, u - 1]))
    np.add.at(out, (v + 1, u), np.einsum("ij,ij->i", db, q[v + 1, u]))
    np.add.at(out, (v - 1, u), -np.einsum("ij,ij->i", db, q[v - 1, u]))
    return out


def loss_norm(pred: np.ndarray, true: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean (1 - cosine) over aligned unit-normal rows; gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    true = np.asarray(true, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0:
        return 0.0, np.zeros_like(pred)
    return float(np.mean(1.0 - np.einsum("ij,ij->i", pred, true))), -true / len(pred)


@dataclass
class LossBreakdown:
    total: float
    depth: float
    prob: float
    norm: float
    n_supervised: int
    n_excluded: int


def total_loss(model: Model, prep: ScenePrep, target: SupervisionTarget, k: CameraIntrinsics,
               weights: LossWeights = LossWeights(), need_grad: bool = True):
    """Weighted loss and (optionally) gradients for every parameter block.

    Gradients are None when the loss is not finite.
    """
    logit, sigma, cache = forward(model, prep)
    n_sup = len(target.rays)
    if n_sup == 0:
        zero = {n: np.zeros_like(p) for n, p in model.params.items()}
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0, target.n_excluded), zero
    span = prep.span
    sel = select_pairs(prep, logit)
    depth_all = ray_depths(prep, sel, sigma * span)
    l_depth, g_depth = loss_depth(depth_all[target.rays], target.depth)
    l_prob, g_logit = _segment_softmax_ce(prep, logit, target.rays, target.pair)

    # normals on the supervised rays only
    d_ray = np.zeros(len(sel))
    d_ray[target.rays] += weights.w_depth * g_depth
    img = np.zeros(prep.shape)
    rv, ru = prep.ray_pixels[target.rays, 1], prep.ray_pixels[target.rays, 0]
    img[rv, ru] = depth_all[target.rays]
    mask = np.zeros(prep.shape, dtype=bool)
    npix = prep.ray_pixels[target.normal_pixels]
    mask[npix[:, 1], npix[:, 0]] = True
    kk = _intrinsics_for(prep, k)
    pred_n, valid = normals_from_depth(img, kk, mask)
    keep = valid[npix[:, 1], npix[:, 0]]
    l_norm, g_n = loss_norm(pred_n[npix[keep, 1], npix[keep, 0]], target.normals[keep])
    total = weights.w_depth * l_depth + weights.w_prob * l_prob + weights.w_norm * l_norm
    breakdown = LossBreakdown(float(total), l_depth, l_prob, l_norm, n_sup, target.n_excluded)
    if not need_grad or not np.isfinite(total):
        return breakdown, None
    if keep.any() and weights.w_norm:
        dn = np.zeros(prep.shape + (3,))
        dn[npix[keep, 1], npix[keep, 0]] = weights.w_norm * g_n
        d_img = normals_backward(img, kk, mask, dn)
        d_ray[target.rays] += d_img[rv, ru]
    d_sigma = np.zeros(len(sigma))
    ok = sel >= 0
    np.add.at(d_sigma, sel[ok], d_ray[ok] * span[sel[ok]] * prep.ray_dirs[ok, 2])
    grads = backward(model, prep, cache, weights.w_prob * g_logit, d_sigma)
    return breakdown, grads


def _intrinsics_for(prep: ScenePrep, k: CameraIntrinsics) -> CameraIntrinsics:
    if (k.height, k.width) != prep.shape:
        raise TrainingError("intrinsics do not match the prepared scene")
    return k


# optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})


def lr_at(epoch: int, epochs: int, lr: float = 1e-3, lr_late: float = 1e-4, decay_fraction: float = 0.8) -> float:
    """Step schedule: ``lr`` for the first 80% of epochs, ``lr_late`` after."""
    return lr if epoch < decay_fraction * epochs else lr_late


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise Diverged(f"diverged: non-finite gradient in {n}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ValueError(f"gradient shape mismatch for {n}")
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[n] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# training loop ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    lr_late: float = 1e-4
    decay_fraction: float = 0.8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    max_steps: int | None = None


@dataclass
class PreparedScene:
    prep: ScenePrep
    target: SupervisionTarget
    intrinsics: CameraIntrinsics
    scene: object = None

    @classmethod
    def from_record(cls, scene, config: ModelConfig, keep_scene: bool = True) -> "PreparedScene":
        prep = prepare_record(scene, config)
        return cls(prep, build_targets(prep, scene.depth_gt, scene.intrinsics), scene.intrinsics,
                   scene if keep_scene else None)


def restored_rays(model: Model, ps: PreparedScene) -> np.ndarray:
    logit, sigma, _ = forward(model, ps.prep)
    return ray_depths(ps.prep, select_pairs(ps.prep, logit), sigma * ps.prep.span)


def masked_metrics(model: Model, scenes: list[PreparedScene]):
    from .metrics import evaluate_arrays

    pred, gt = [], []
    for ps in scenes:
        pred.append(restored_rays(model, ps))
        u, v = ps.prep.ray_pixels[:, 0], ps.prep.ray_pixels[:, 1]
        gt.append(ps.scene.depth_gt[v, u])
    return evaluate_arrays(np.concatenate(pred), np.concatenate(gt))


def train(train_set: list[PreparedScene], config: TrainConfig, model: Model | None = None,
          val_set: list[PreparedScene] | None = None, model_config: ModelConfig | None = None,
          log_stream=None, on_epoch=None):
    """Per-scene Adam steps over shuffled epochs; returns (best model, epoch log).

    The best model is the one with the lowest validation RMSE when ``val_set``
    is given, otherwise the final one.
    """
    if not train_set:
        raise TrainingError("empty training set")
    model = model.copy() if model is not None else Model.init(config.seed, model_config)
    state = AdamState.for_params(model.params)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31337]))
    history = []
    best, best_rmse = model.copy(), math.inf
    steps = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config.epochs, config.lr, config.lr_late, config.decay_fraction)
        sums = np.zeros(4)
        count = 0
        for i in rng.permutation(len(train_set)):
            ps = train_set[i]
            if len(ps.target.rays) == 0:
                continue
            parts, grads = total_loss(model, ps.prep, ps.target, ps.intrinsics, config.weights)
            if not math.isfinite(parts.total):
                raise Diverged(f"diverged at epoch {epoch}", best)
            adam_step(state, model.params, grads, lr)
            sums += (parts.total, parts.depth, parts.prob, parts.norm)
            count += 1
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        entry = {"epoch": epoch, "lr": lr, "steps": steps}
        entry.update(dict(zip(("loss", "loss_depth", "loss_prob", "loss_norm"), (sums / max(count, 1)).tolist())))
        if val_set:
            rep = masked_metrics(model, val_set)
            entry.update({f"val_{k}": v for k, v in rep.to_dict().items()})
            if rep.rmse < best_rmse:
                best_rmse, best = rep.rmse, model.copy()
        else:
            best = model.copy()
        history.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
            log_stream.flush()
        if on_epoch is not None:
            on_epoch(epoch, model, entry)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return best, history


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d
