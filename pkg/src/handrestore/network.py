"""Decoder MLPs, the full restoration forward pass and its reverse pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import features as F
from .geometry import GeometryError, VoxelGrid, backproject, build_voxel_grid, pixel_dirs, traverse_cells

HIDDEN = (256, 128)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 8
    margin: float = 0.05
    hidden: tuple[int, ...] = HIDDEN
    hand_feature: str = "3d"  # off | 2d | 3d
    point_fusion: bool = True
    multiscale: bool = True

    def __post_init__(self) -> None:
        if self.hand_feature not in ("off", "2d", "3d"):
            raise ValueError(f"hand_feature must be off, 2d or 3d, got {self.hand_feature!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = 48
    for i, c in enumerate(F.LEVEL_CHANNELS):
        shapes[f"enc.w{i + 1}"] = (fan_in, c)
        shapes[f"enc.b{i + 1}"] = (c,)
        fan_in = 4 * c
    shapes["enc.wr"] = (sum(F.LEVEL_CHANNELS), F.C_RGB)
    shapes["enc.br"] = (F.C_RGB,)
    shapes["fuse.wxyz"] = (3, F.POINT_DIM)
    shapes["fuse.bxyz"] = (F.POINT_DIM,)
    shapes["fuse.wrgb"] = (F.C_RGB, F.POINT_DIM)
    shapes["fuse.brgb"] = (F.POINT_DIM,)
    shapes["vox.w1"] = (2 * F.POINT_DIM, 2 * F.POINT_DIM)
    shapes["vox.b1"] = (2 * F.POINT_DIM,)
    shapes["vox.w2"] = (4 * F.POINT_DIM, F.VOXEL_DIM)
    shapes["vox.b2"] = (F.VOXEL_DIM,)
    for head in ("off", "prob"):
        dims = (F.EMBED_DIM, *cfg.hidden, 1)
        for i in range(len(dims) - 1):
            shapes[f"{head}.w{i}"] = (dims[i], dims[i + 1])
            shapes[f"{head}.b{i}"] = (dims[i + 1],)
    return shapes


# MLP -------------------------------------------------------------------------

@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def from_params(cls, params: dict, head: str) -> "Mlp":
        ws, bs = [], []
        i = 0
        while f"{head}.w{i}" in params:
            ws.append(params[f"{head}.w{i}"])
            bs.append(params[f"{head}.b{i}"])
            i += 1
        return cls(ws, bs)


def mlp_forward(m: Mlp, x: np.ndarray):
    """Affine + rectifier stack with an identity head. Accepts (D,) or (B, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.weights[0].shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} != {m.weights[0].shape[0]}")
    tape = [x]
    h = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        tape.append(z)
    return h, tape


def mlp_backward(m: Mlp, tape, dy: np.ndarray):
    """Returns (dx, [dW...], [db...])."""
    n = len(m.weights)
    dws, dbs = [None] * n, [None] * n
    g = dy
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (tape[i + 1] > 0)
        a = tape[0] if i == 0 else np.maximum(tape[i], 0.0)
        if g.ndim == 1:
            dws[i] = np.outer(a, g)
            dbs[i] = g.copy()
        else:
            dws[i] = a.T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ m.weights[i].T
    return g, dws, dbs


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# model -----------------------------------------------------------------------

class Model:
    """All learnable parameters, stored as named float64 blocks."""

    def __init__(self, params: dict[str, np.ndarray], config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        shapes = param_shapes(self.config)
        if set(params) != set(shapes):
            raise ValueError("parameter blocks do not match the configuration")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in shapes}

    @classmethod
    def init(cls, seed: int = 0, config: ModelConfig | None = None) -> "Model":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if len(shape) == 2:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-lim, lim, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(params, config)

    @classmethod
    def zeros(cls, config: ModelConfig | None = None) -> "Model":
        config = config or ModelConfig()
        return cls({n: np.zeros(s) for n, s in param_shapes(config).items()}, config)

    @property
    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names])

    def set_flat(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.n_params:
            raise ValueError("flat vector length mismatch")
        i = 0
        for n in self.names:
            p = self.params[n]
            self.params[n] = v[i:i + p.size].reshape(p.shape).copy()
            i += p.size

    def copy(self) -> "Model":
        return Model({n: p.copy() for n, p in self.params.items()}, self.config)


@dataclass
class PairPrediction:
    logit: float
    sigma: float
    offset: float


def predict_pair(model: Model, embedding: np.ndarray, span: float) -> PairPrediction:
    if not span > 0:
        raise ValueError("voxel span must be positive")
    logit, _ = mlp_forward(Mlp.from_params(model.params, "prob"), embedding)
    raw, _ = mlp_forward(Mlp.from_params(model.params, "off"), embedding)
    s = float(sigmoid(raw[0]))
    return PairPrediction(float(logit[0]), s, s * span)


# per-scene static structure --------------------------------------------------

def hand_keypoints_for(kp: np.ndarray, mode: str) -> np.ndarray | None:
    if mode == "off":
        return None
    kp = np.array(kp, dtype=np.float64)
    if mode == "2d":
        kp[:, 2] = 0.0
    return kp


@dataclass
class ScenePrep:
    """Everything about a scene that does not depend on the parameters."""

    shape: tuple[int, int]
    rgb: np.ndarray
    grid: VoxelGrid
    ray_pixels: np.ndarray  # (R, 2) u, v of the queried rays
    ray_dirs: np.ndarray  # (R, 3)
    roi_idx: np.ndarray  # (R, 8, 8)
    point_offsets: np.ndarray  # (N, 3) sorted by voxel
    point_color_idx: np.ndarray  # (N,) flat pixel index, same order
    seg: np.ndarray
    starts: np.ndarray
    occ_ids: np.ndarray  # (V,) flat voxel ids in encoder order
    pair_ray: np.ndarray  # (P,) grouped by ray, increasing t_in within a ray
    pair_vox: np.ndarray  # (P,) index into occ_ids
    t_in: np.ndarray
    t_out: np.ndarray
    ray_count: np.ndarray  # (R,) pairs per ray
    hand_abs: np.ndarray  # (63,)
    hand_rel: np.ndarray  # (V, 63)
    pe_ray: np.ndarray  # (R, 30)
    pe_vox: np.ndarray  # (V, 30)

    @property
    def span(self) -> np.ndarray:
        return self.t_out - self.t_in

    @property
    def ray_first(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.ray_count)[:-1]]).astype(np.int64)

    def pair_slices(self):
        first = self.ray_first
        return [slice(f, f + c) for f, c in zip(first, self.ray_count)]

    def embedding(self, ray_feat: np.ndarray, vox_feat: np.ndarray) -> np.ndarray:
        """Explicit (P, 378) per-pair embeddings; used for checks, not in training."""
        n = len(self.pair_ray)
        return F.assemble(ray_feat[self.pair_ray], vox_feat[self.pair_vox],
                          np.concatenate([np.broadcast_to(self.hand_abs, (n, 63)),
                                          self.hand_rel[self.pair_vox]], axis=1),
                          self.pe_ray[self.pair_ray], self.pe_vox[self.pair_vox])


def prepare_scene(rgb, depth, k, ray_mask, keypoints, config: ModelConfig) -> ScenePrep:
    points, pixels = backproject(depth, k)
    if len(points) == 0:
        raise GeometryError("no valid geometry")
    grid = build_voxel_grid(points, config.resolution, config.margin)
    flat = grid.point_flat_ids()
    order = np.argsort(flat, kind="stable")
    occ_ids, starts = np.unique(flat[order], return_index=True)
    seg = np.repeat(np.arange(len(occ_ids)), np.diff(np.append(starts, len(order))))
    centers = grid.centers(flat[order])
    offsets = (points[order] - centers) / grid.cell_size
    color_idx = pixels[order, 1] * k.width + pixels[order, 0]
    compact = {int(v): i for i, v in enumerate(occ_ids)}
    occ = grid.occupancy.ravel()

    rv, ru = np.nonzero(ray_mask)
    ray_pixels = np.stack([ru, rv], axis=1)
    dirs = pixel_dirs(k, ru, rv).reshape(-1, 3)
    pr, pv, ti, to, counts = [], [], [], [], np.zeros(len(ray_pixels), dtype=np.int64)
    for r, d in enumerate(dirs):
        for c, a, b in traverse_cells(grid, d):
            if occ[c]:
                pr.append(r)
                pv.append(compact[c])
                ti.append(a)
                to.append(b)
                counts[r] += 1

    vox_centers = grid.centers(occ_ids)
    kp = hand_keypoints_for(keypoints, config.hand_feature)
    if kp is None:
        hand_abs = np.zeros(63)
        hand_rel = np.zeros((len(occ_ids), 63))
    else:
        hand_abs = F.hand_abs_feature(kp)
        hand_rel = (kp[None, :, :] - vox_centers[:, None, :]).reshape(len(occ_ids), -1)
    rgb = np.asarray(rgb)
    rgb = rgb / 255.0 if rgb.dtype == np.uint8 else rgb.astype(np.float64)
    return ScenePrep(
        shape=(k.height, k.width), rgb=rgb, grid=grid,
        ray_pixels=ray_pixels, ray_dirs=dirs, roi_idx=F.roi_indices(ray_pixels, k.height, k.width),
        point_offsets=offsets, point_color_idx=color_idx, seg=seg, starts=starts, occ_ids=occ_ids,
        pair_ray=np.asarray(pr, dtype=np.int64), pair_vox=np.asarray(pv, dtype=np.int64),
        t_in=np.asarray(ti, dtype=np.float64), t_out=np.asarray(to, dtype=np.float64),
        ray_count=counts, hand_abs=hand_abs, hand_rel=hand_rel,
        pe_ray=F.positional_embedding(dirs), pe_vox=F.positional_embedding(vox_centers),
    )


def prepare_record(scene, config: ModelConfig, mask: np.ndarray | None = None) -> ScenePrep:
    return prepare_scene(scene.rgb, scene.depth_raw, scene.intrinsics,
                         scene.mask_obj if mask is None else mask, scene.keypoints, config)


# forward / backward ----------------------------------------------------------

_E = F.SLICES
_HAND_ABS = slice(_E["hand"].start, _E["hand"].start + 63)
_HAND_REL = slice(_E["hand"].start + 63, _E["hand"].stop)


def _ray_rows(w: np.ndarray) -> np.ndarray:
    return np.concatenate([w[_E["ray"]], w[_E["pe_ray"]]], axis=0)


def _vox_rows(w: np.ndarray) -> np.ndarray:
    return np.concatenate([w[_E["voxel"]], w[_HAND_REL], w[_E["pe_voxel"]]], axis=0)


def _segment_sum(x: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(index, kind="stable")
    keys, first = np.unique(index[order], return_index=True)
    out = np.zeros((n, x.shape[1]))
    if len(order):
        out[keys] = np.add.reduceat(x[order], first, axis=0)
    return out


def forward(model: Model, prep: ScenePrep):
    """Per-pair logits and squashed offsets; returns (logit, sigma, cache).

    The first decoder layer is evaluated on per-ray and per-voxel inputs and
    gathered per pair, which equals applying it to the concatenated 378-d
    pair embedding (every block of that embedding is per-ray or per-voxel).
    """
    p = model.params
    cfg = model.config
    dense, enc_cache = F.encode_image_forward(prep.rgb, p, cfg.multiscale)
    c = dense.shape[-1]
    ray_feat = F.roi_forward(dense, prep.roi_idx)
    colors = dense.reshape(-1, c)[prep.point_color_idx]
    fused, fuse_cache = F.fuse_forward(prep.point_offsets, colors, p, cfg.point_fusion)
    vox_feat, vox_cache = F.voxel_forward(fused, prep.seg, prep.starts, p)
    ray_in = np.concatenate([ray_feat, prep.pe_ray], axis=1)
    vox_in = np.concatenate([vox_feat, prep.hand_rel, prep.pe_vox], axis=1)
    heads = {}
    for head in ("prob", "off"):
        m = Mlp.from_params(p, head)
        w0, b0 = m.weights[0], m.biases[0]
        z0 = ((ray_in @ _ray_rows(w0))[prep.pair_ray] + (vox_in @ _vox_rows(w0))[prep.pair_vox]
              + (prep.hand_abs @ w0[_HAND_ABS] + b0))
        rest = Mlp(m.weights[1:], m.biases[1:])
        out, tape = mlp_forward(rest, np.maximum(z0, 0.0))
        heads[head] = (out[:, 0], z0, tape)
    logit = heads["prob"][0]
    sigma = sigmoid(heads["off"][0])
    cache = (dense.shape, enc_cache, fuse_cache, vox_cache, ray_in, vox_in, heads, sigma)
    return logit, sigma, cache


def backward(model: Model, prep: ScenePrep, cache, d_logit: np.ndarray, d_sigma: np.ndarray) -> dict:
    p = model.params
    dense_shape, enc_cache, fuse_cache, vox_cache, ray_in, vox_in, heads, sigma = cache
    grads: dict[str, np.ndarray] = {}
    d_ray_in = np.zeros_like(ray_in)
    d_vox_in = np.zeros_like(vox_in)
    n_ray, n_vox = len(ray_in), len(vox_in)
    for head, dy in (("prob", d_logit), ("off", d_sigma * sigma * (1 - sigma))):
        m = Mlp.from_params(p, head)
        _, z0, tape = heads[head]
        rest = Mlp(m.weights[1:], m.biases[1:])
        dh, dws, dbs = mlp_backward(rest, tape, dy[:, None])
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            F._acc(grads, f"{head}.w{i + 1}", dw)
            F._acc(grads, f"{head}.b{i + 1}", db)
        dz0 = dh * (z0 > 0)
        d_r = _segment_sum(dz0, prep.pair_ray, n_ray)
        d_v = _segment_sum(dz0, prep.pair_vox, n_vox)
        w0 = m.weights[0]
        dw0 = np.zeros_like(w0)
        dwr = ray_in.T @ d_r
        dwv = vox_in.T @ d_v
        nr = F.RAY_DIM
        dw0[_E["ray"]] = dwr[:nr]
        dw0[_E["pe_ray"]] = dwr[nr:]
        nv = F.VOXEL_DIM
        dw0[_E["voxel"]] = dwv[:nv]
        dw0[_HAND_REL] = dwv[nv:nv + 63]
        dw0[_E["pe_voxel"]] = dwv[nv + 63:]
        dsum = dz0.sum(axis=0)
        dw0[_HAND_ABS] = np.outer(prep.hand_abs, dsum)
        F._acc(grads, f"{head}.w0", dw0)
        F._acc(grads, f"{head}.b0", dsum)
        d_ray_in += d_r @ _ray_rows(w0).T
        d_vox_in += d_v @ _vox_rows(w0).T
    d_ray = d_ray_in[:, :F.RAY_DIM]
    d_vox = d_vox_in[:, :F.VOXEL_DIM]
    d_fused = F.voxel_backward(vox_cache, d_vox, p, grads)
    d_colors = F.fuse_backward(fuse_cache, d_fused, p, grads)
    d_dense = F.roi_backward(d_ray, prep.roi_idx, dense_shape)
    h, w, c = dense_shape
    flat = d_dense.reshape(-1, c)
    np.add.at(flat, prep.point_color_idx, d_colors)
    F.encode_image_backward(enc_cache, d_dense, p, grads)
    return grads


def select_pairs(prep: ScenePrep, logit: np.ndarray) -> np.ndarray:
    """Index of the winning pair for every ray (-1 where a ray has no pairs).

    Highest logit wins; ties go to the nearest voxel, which comes first because
    pairs are ordered by entry distance.
    """
    sel = np.full(len(prep.ray_count), -1, dtype=np.int64)
    has = prep.ray_count > 0
    if not has.any():
        return sel
    first = prep.ray_first[has]
    mx = np.maximum.reduceat(logit, first)
    seg = np.repeat(np.arange(len(first)), prep.ray_count[has])
    cand = np.where(logit == mx[seg], np.arange(len(logit)), len(logit))
    win = np.minimum.reduceat(cand, first)
    # NaN logits match nothing; fall back to the nearest pair so the NaN propagates
    sel[has] = np.where(win == len(logit), first, win)
    return sel


def ray_depths(prep: ScenePrep, sel: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """z-depth of entry point plus offset along the ray, 0 for rays without pairs."""
    out = np.zeros(len(sel))
    ok = sel >= 0
    j = sel[ok]
    out[ok] = (prep.t_in[j] + offset[j]) * prep.ray_dirs[ok, 2]
    return out


class OracleScorer:
    """Scores pairs from perfect depth: the containing voxel wins, offset is exact."""

    def __init__(self, perfect_depth: np.ndarray):
        self.perfect = np.asarray(perfect_depth, dtype=np.float64)

    def score(self, prep: ScenePrep) -> tuple[np.ndarray, np.ndarray]:
        logit = np.zeros(len(prep.pair_ray))
        offset = 0.5 * prep.span
        u, v = prep.ray_pixels[:, 0], prep.ray_pixels[:, 1]
        t_true = self.perfect[v, u] / prep.ray_dirs[:, 2]
        for r, sl in enumerate(prep.pair_slices()):
            for j in range(sl.start, sl.stop):
                if prep.t_in[j] <= t_true[r] <= prep.t_out[j]:
                    logit[j] = 1.0
                    offset[j] = t_true[r] - prep.t_in[j]
                    break
        return logit, offset


def score_pairs(scorer, prep: ScenePrep) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scorer, Model):
        logit, sigma, _ = forward(scorer, prep)
        return logit, sigma * prep.span
    return scorer.score(prep)


def restore(model, scene, mask: np.ndarray | None = None) -> np.ndarray:
    """Restored depth: object-mask pixels predicted, everything else copied.

    ``model`` is a :class:`Model` or any object with ``score(prep)`` returning
    per-pair (logit, offset), e.g. :class:`OracleScorer`.
    """
    mask = scene.mask_obj if mask is None else mask
    out = np.array(scene.depth_raw, dtype=np.float64)
    if not np.any(mask):
        return out
    config = model.config if isinstance(model, Model) else ModelConfig()
    prep = prepare_record(scene, config, mask)
    logit, offset = score_pairs(model, prep)
    depth = ray_depths(prep, select_pairs(prep, logit), offset)
    u, v = prep.ray_pixels[:, 0], prep.ray_pixels[:, 1]
    out[v, u] = depth
    return out
