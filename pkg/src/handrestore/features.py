"""Per-pair embedding components and their reverse-mode gradients.

Every learnable op comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` taking the cache and the output gradient. Parameters live in a
flat ``dict[str, np.ndarray]`` (see :mod:`handrestore.network`); backward
functions accumulate into a gradient dict of the same layout.
"""

from __future__ import annotations

import numpy as np

from .geometry import VoxelGrid

C_BASE = 16
C_RGB = 32
LEVEL_CHANNELS = (C_BASE, 2 * C_BASE, 3 * C_BASE, 4 * C_BASE)
ROI_WINDOW = 8
ROI_OUT = 2
RAY_DIM = ROI_OUT * ROI_OUT * C_RGB
POINT_DIM = 16
VOXEL_DIM = 64
HAND_DIM = 126
PE_OCTAVES = 5
PE_DIM = 2 * 3 * PE_OCTAVES
EMBED_DIM = RAY_DIM + VOXEL_DIM + HAND_DIM + 2 * PE_DIM

WRIST, THUMB_CMC, INDEX_MCP, MIDDLE_MCP, RING_MCP, PINKY_MCP = 0, 1, 5, 9, 13, 17


class FeatureError(ValueError):
    pass


def _acc(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# image encoder ---------------------------------------------------------------

def resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights (half-pixel centers, edge clamped)."""
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    np.add.at(a, (np.arange(n_out), lo), 1 - w)
    np.add.at(a, (np.arange(n_out), hi), w)
    return a


def _space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // f, f, w // f, f, c).transpose(0, 2, 1, 3, 4).reshape(h // f, w // f, f * f * c)


def _depth_to_space(x: np.ndarray, f: int, c: int) -> np.ndarray:
    h, w, _ = x.shape
    return x.reshape(h, w, f, f, c).transpose(0, 2, 1, 3, 4).reshape(h * f, w * f, c)


def _resize(x: np.ndarray, ah: np.ndarray, aw: np.ndarray) -> np.ndarray:
    return np.einsum("ih,hwc,jw->ijc", ah, x, aw, optimize=True)


def encode_image_forward(rgb: np.ndarray, params: dict, multiscale: bool = True):
    """Four-level patch pyramid (strides 4, 8, 16, 32) fused into an H x W x 32 map."""
    h, w = rgb.shape[:2]
    if h % 32 or w % 32:
        raise FeatureError(f"image size {h}x{w} must be divisible by 32")
    x = np.asarray(rgb, dtype=np.float64)
    inputs, pres, levels = [], [], []
    cur = _space_to_depth(x, 4)
    for i in range(4):
        if i > 0:
            cur = _space_to_depth(levels[-1], 2)
        pre = cur @ params[f"enc.w{i + 1}"] + params[f"enc.b{i + 1}"]
        inputs.append(cur)
        pres.append(pre)
        levels.append(np.maximum(pre, 0.0))
    h4, w4 = h // 4, w // 4
    mats = []
    aligned = [levels[0]]
    for i in range(1, 4):
        lh, lw = levels[i].shape[:2]
        ah, aw = resize_matrix(h4, lh), resize_matrix(w4, lw)
        mats.append((ah, aw))
        up = _resize(levels[i], ah, aw)
        aligned.append(up if multiscale else np.zeros_like(up))
    cat = np.concatenate(aligned, axis=-1)
    red = cat @ params["enc.wr"] + params["enc.br"]
    fh, fw = resize_matrix(h, h4), resize_matrix(w, w4)
    dense = _resize(red, fh, fw)
    cache = (inputs, pres, mats, cat, (fh, fw), multiscale)
    return dense, cache


def encode_image_backward(cache, d_dense: np.ndarray, params: dict, grads: dict) -> None:
    inputs, pres, mats, cat, (fh, fw), multiscale = cache
    d_red = _resize(d_dense, fh.T, fw.T)
    _acc(grads, "enc.wr", cat.reshape(-1, cat.shape[-1]).T @ d_red.reshape(-1, d_red.shape[-1]))
    _acc(grads, "enc.br", d_red.sum(axis=(0, 1)))
    d_cat = d_red @ params["enc.wr"].T
    splits = np.cumsum(LEVEL_CHANNELS)[:-1]
    d_aligned = np.split(d_cat, splits, axis=-1)
    d_levels = [d_aligned[0], None, None, None]
    for i in range(1, 4):
        if multiscale:
            ah, aw = mats[i - 1]
            d_levels[i] = _resize(d_aligned[i], ah.T, aw.T)
        else:
            d_levels[i] = np.zeros(pres[i].shape)
    for i in range(3, -1, -1):
        d_pre = d_levels[i] * (pres[i] > 0)
        x = inputs[i]
        _acc(grads, f"enc.w{i + 1}", x.reshape(-1, x.shape[-1]).T @ d_pre.reshape(-1, d_pre.shape[-1]))
        _acc(grads, f"enc.b{i + 1}", d_pre.sum(axis=(0, 1)))
        if i > 0:
            d_in = d_pre @ params[f"enc.w{i + 1}"].T
            d_levels[i - 1] = d_levels[i - 1] + _depth_to_space(d_in, 2, LEVEL_CHANNELS[i - 1])


def encode_image(rgb: np.ndarray, params: dict, multiscale: bool = True) -> np.ndarray:
    return encode_image_forward(rgb, params, multiscale)[0]


# ray features ----------------------------------------------------------------

def roi_indices(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Flat pixel indices of each ray's 8x8 window, shape (R, 8, 8)."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    off = np.arange(ROI_WINDOW) - ROI_WINDOW // 2
    rows = np.clip(pixels[:, 1:2] + off, 0, height - 1)
    cols = np.clip(pixels[:, 0:1] + off, 0, width - 1)
    return rows[:, :, None] * width + cols[:, None, :]


def roi_forward(dense: np.ndarray, idx: np.ndarray) -> np.ndarray:
    c = dense.shape[-1]
    win = dense.reshape(-1, c)[idx]  # (R, 8, 8, C)
    s = ROI_WINDOW // ROI_OUT
    pooled = win.reshape(-1, ROI_OUT, s, ROI_OUT, s, c).mean(axis=(2, 4))
    return pooled.reshape(len(idx), -1)


def roi_backward(d_feat: np.ndarray, idx: np.ndarray, shape: tuple) -> np.ndarray:
    h, w, c = shape
    s = ROI_WINDOW // ROI_OUT
    d = d_feat.reshape(-1, ROI_OUT, 1, ROI_OUT, 1, c) / (s * s)
    d = np.broadcast_to(d, (len(idx), ROI_OUT, s, ROI_OUT, s, c)).reshape(len(idx), ROI_WINDOW, ROI_WINDOW, c)
    out = np.zeros((h * w, c))
    np.add.at(out, idx.reshape(-1), d.reshape(-1, c))
    return out.reshape(h, w, c)


def roi_ray_feature(dense: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    h, w = dense.shape[:2]
    u, v = pixel
    if not (0 <= u < w and 0 <= v < h):
        raise FeatureError(f"pixel {pixel} out of bounds")
    return roi_forward(dense, roi_indices(np.array([pixel]), h, w))[0]


# point fusion ----------------------------------------------------------------

def point_offsets(points: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """(point - voxel center) / cell size for every point."""
    points = np.asarray(points, dtype=np.float64)
    if np.any(points < grid.origin) or np.any(points > grid.upper):
        raise FeatureError("point outside grid")
    cells = grid.bin_points(points)
    centers = grid.origin + (cells + 0.5) * grid.cell_size
    return (points - centers) / grid.cell_size


def _rowwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # unlike BLAS, each output row is independent of the other rows bit for bit,
    # which keeps the voxel max-pool exactly permutation invariant
    return np.einsum("ni,ij->nj", x, w)


def fuse_forward(offsets: np.ndarray, colors: np.ndarray, params: dict, fusion: bool = True):
    p_xyz = _rowwise(offsets, params["fuse.wxyz"]) + params["fuse.bxyz"]
    if fusion:
        p_rgb = _rowwise(colors, params["fuse.wrgb"]) + params["fuse.brgb"]
    else:
        p_rgb = np.zeros((len(offsets), POINT_DIM))
    return np.concatenate([p_xyz, p_rgb], axis=1), (offsets, colors, fusion)


def fuse_backward(cache, d_fused: np.ndarray, params: dict, grads: dict) -> np.ndarray:
    """Returns the gradient w.r.t. the sampled colors."""
    offsets, colors, fusion = cache
    d_xyz, d_rgb = d_fused[:, :POINT_DIM], d_fused[:, POINT_DIM:]
    _acc(grads, "fuse.wxyz", offsets.T @ d_xyz)
    _acc(grads, "fuse.bxyz", d_xyz.sum(axis=0))
    if not fusion:
        _acc(grads, "fuse.wrgb", np.zeros_like(params["fuse.wrgb"]))
        _acc(grads, "fuse.brgb", np.zeros_like(params["fuse.brgb"]))
        return np.zeros_like(colors)
    _acc(grads, "fuse.wrgb", colors.T @ d_rgb)
    _acc(grads, "fuse.brgb", d_rgb.sum(axis=0))
    return d_rgb @ params["fuse.wrgb"].T


def fuse_point_features(points, pixels, grid: VoxelGrid, dense: np.ndarray, params: dict,
                        fusion: bool = True) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.int64)
    colors = dense[pixels[:, 1], pixels[:, 0]]
    return fuse_forward(point_offsets(points, grid), colors, params, fusion)[0]


# voxel encoder ---------------------------------------------------------------

def _segment_first_argmax(x: np.ndarray, mx: np.ndarray, seg: np.ndarray, starts: np.ndarray) -> np.ndarray:
    rows = np.arange(len(x))[:, None]
    cand = np.where(x == mx[seg], rows, len(x))
    return np.minimum.reduceat(cand, starts, axis=0)


def voxel_forward(fused: np.ndarray, seg: np.ndarray, starts: np.ndarray, params: dict):
    """Two max-pool stages over points grouped by voxel.

    ``fused`` rows must be sorted so each voxel's points are contiguous;
    ``starts`` are the first rows and ``seg`` maps each row to its voxel.
    """
    pre1 = _rowwise(fused, params["vox.w1"]) + params["vox.b1"]
    h1 = np.maximum(pre1, 0.0)
    m1 = np.maximum.reduceat(h1, starts, axis=0)
    cat = np.concatenate([h1, m1[seg]], axis=1)
    pre2 = _rowwise(cat, params["vox.w2"]) + params["vox.b2"]
    h2 = np.maximum(pre2, 0.0)
    out = np.maximum.reduceat(h2, starts, axis=0)
    arg1 = _segment_first_argmax(h1, m1, seg, starts)
    arg2 = _segment_first_argmax(h2, out, seg, starts)
    return out, (fused, pre1, cat, pre2, arg1, arg2, starts)


def voxel_backward(cache, d_out: np.ndarray, params: dict, grads: dict) -> np.ndarray:
    fused, pre1, cat, pre2, arg1, arg2, starts = cache
    n = len(fused)
    cols2 = np.broadcast_to(np.arange(d_out.shape[1]), d_out.shape)
    d_h2 = np.zeros((n, d_out.shape[1]))
    np.add.at(d_h2, (arg2, cols2), d_out)
    d_pre2 = d_h2 * (pre2 > 0)
    _acc(grads, "vox.w2", cat.T @ d_pre2)
    _acc(grads, "vox.b2", d_pre2.sum(axis=0))
    d_cat = d_pre2 @ params["vox.w2"].T
    half = d_cat.shape[1] // 2
    d_h1 = d_cat[:, :half].copy()
    d_m1 = np.add.reduceat(d_cat[:, half:], starts, axis=0)
    cols1 = np.broadcast_to(np.arange(half), d_m1.shape)
    np.add.at(d_h1, (arg1, cols1), d_m1)
    d_pre1 = d_h1 * (pre1 > 0)
    _acc(grads, "vox.w1", fused.T @ d_pre1)
    _acc(grads, "vox.b1", d_pre1.sum(axis=0))
    return d_pre1 @ params["vox.w1"].T


def encode_voxel(fused_lists, params: dict) -> np.ndarray:
    """Voxel features for a list of per-voxel point-feature arrays."""
    if any(len(f) == 0 for f in fused_lists):
        raise FeatureError("empty voxel")
    sizes = [len(f) for f in fused_lists]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    seg = np.repeat(np.arange(len(sizes)), sizes)
    return voxel_forward(np.concatenate(fused_lists, axis=0), seg, starts, params)[0]


# hand features ---------------------------------------------------------------

def check_keypoints(kp: np.ndarray) -> np.ndarray:
    kp = np.asarray(kp, dtype=np.float64)
    if kp.shape != (21, 3) or not np.all(np.isfinite(kp)):
        raise FeatureError("hand keypoints must be a finite 21x3 array")
    span = np.max(np.linalg.norm(kp[:, None] - kp[None], axis=-1))
    if span >= 0.5:
        raise FeatureError(f"implausible hand span {span:.3f} m")
    return kp


def hand_frame(kp: np.ndarray) -> np.ndarray:
    """Rows are the wrist-frame axes expressed in the input frame."""
    a = kp[MIDDLE_MCP] - kp[WRIST]
    b = kp[INDEX_MCP] - kp[WRIST]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise FeatureError("degenerate hand frame")
    sin = np.linalg.norm(np.cross(a, b)) / (na * nb)
    if sin < 1e-6:
        raise FeatureError("degenerate hand frame")
    x = a / na
    y = b - (b @ x) * x
    y /= np.linalg.norm(y)
    return np.stack([x, y, np.cross(x, y)])


def hand_abs_feature(kp: np.ndarray) -> np.ndarray:
    kp = check_keypoints(kp)
    return ((kp - kp[WRIST]) @ hand_frame(kp).T).ravel()


def hand_rel_feature(kp: np.ndarray, voxel_center: np.ndarray) -> np.ndarray:
    kp = check_keypoints(kp)
    return (kp - np.asarray(voxel_center, dtype=np.float64)).ravel()


def positional_embedding(x: np.ndarray, octaves: int = PE_OCTAVES) -> np.ndarray:
    """sin/cos of 2^k * pi * x for each component; works on (..., 3) arrays."""
    x = np.asarray(x, dtype=np.float64)
    ang = x[..., :, None] * (np.pi * 2.0 ** np.arange(octaves))
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape[:-1], -1)


SLICES = {
    "ray": slice(0, RAY_DIM),
    "voxel": slice(RAY_DIM, RAY_DIM + VOXEL_DIM),
    "hand": slice(RAY_DIM + VOXEL_DIM, RAY_DIM + VOXEL_DIM + HAND_DIM),
    "pe_ray": slice(EMBED_DIM - 2 * PE_DIM, EMBED_DIM - PE_DIM),
    "pe_voxel": slice(EMBED_DIM - PE_DIM, EMBED_DIM),
}


def assemble(f_ray, f_voxel, f_hand, pe_ray, pe_voxel) -> np.ndarray:
    parts = [np.asarray(p, dtype=np.float64) for p in (f_ray, f_voxel, f_hand, pe_ray, pe_voxel)]
    want = (RAY_DIM, VOXEL_DIM, HAND_DIM, PE_DIM, PE_DIM)
    got = tuple(p.shape[-1] for p in parts)
    if got != want:
        raise FeatureError(f"component lengths {got}, expected {want}")
    return np.concatenate(parts, axis=-1)
