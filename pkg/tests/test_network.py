from dataclasses import replace

import numpy as np
import pytest

from handrestore import datagen
from handrestore import features as F
from handrestore import network as N
from handrestore.geometry import CameraIntrinsics, GeometryError


@pytest.fixture(scope="module")
def scene():
    return datagen.random_scene(0, 3, CameraIntrinsics.default(32, 32))[1]


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def test_mlp_bias_only():
    m = N.Mlp([np.zeros((4, 3))], [np.array([1.0, -2.0, 3.0])])
    y, _ = N.mlp_forward(m, np.arange(4.0))
    assert y.tolist() == [1.0, -2.0, 3.0]


def test_mlp_identity_rectifier():
    m = N.Mlp([np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    x = np.array([-1.0, 0.5, 2.0])
    assert N.mlp_forward(m, x)[0].tolist() == [0.0, 0.5, 2.0]


def test_mlp_dimension_mismatch():
    m = N.Mlp([np.zeros((4, 3))], [np.zeros(3)])
    with pytest.raises(ValueError):
        N.mlp_forward(m, np.zeros(5))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    model = N.Model.init(1)
    m = N.Mlp.from_params(model.params, "off")
    assert m.layer_dims == [378, 256, 128, 1]
    for b in m.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=378)
    y, tape = N.mlp_forward(m, x)
    dx, dws, _ = N.mlp_backward(m, tape, np.ones(1))
    num = _fd(lambda: N.mlp_forward(m, x)[0][0], x)
    assert np.max(np.abs(num - dx)) <= 1e-6 * np.max(np.abs(dx))
    for _ in range(20):
        i, j = rng.integers(0, 256), rng.integers(0, 128)
        w = m.weights[1]
        old = w[i, j]
        w[i, j] = old + 1e-6
        fp = N.mlp_forward(m, x)[0][0]
        w[i, j] = old - 1e-6
        fm = N.mlp_forward(m, x)[0][0]
        w[i, j] = old
        n = (fp - fm) / 2e-6
        assert abs(n - dws[1][i, j]) <= 1e-6 * max(abs(n), 1e-4)


def test_predict_pair_zero_model():
    p = N.predict_pair(N.Model.zeros(), np.ones(378), 0.04)
    assert (p.logit, p.sigma, p.offset) == (0.0, 0.5, 0.02)


def test_predict_pair_offset_stays_inside_span():
    rng = np.random.default_rng(2)
    dims = [378, 256, 128, 1]
    for _ in range(1000):
        ws = [rng.uniform(-1, 1, (a, b)) * np.sqrt(6 / (a + b)) for a, b in zip(dims, dims[1:])]
        bs = [rng.normal(scale=0.1, size=b) for b in dims[1:]]
        raw = N.mlp_forward(N.Mlp(ws, bs), rng.normal(size=378))[0][0]
        span = rng.uniform(1e-3, 0.1)
        d = float(N.sigmoid(raw)) * span
        assert 0 < d < span


def test_predict_pair_offset_gradient():
    rng = np.random.default_rng(4)
    model = N.Model.init(4)
    e = rng.normal(size=378)
    span = 0.03
    m = N.Mlp.from_params(model.params, "off")
    raw, tape = N.mlp_forward(m, e)
    s = float(N.sigmoid(raw[0]))
    dx, _, _ = N.mlp_backward(m, tape, np.array([span * s * (1 - s)]))
    num = _fd(lambda: N.predict_pair(model, e, span).offset, e)
    assert np.max(np.abs(num - dx)) <= 1e-4 * np.max(np.abs(dx))


def test_predict_pair_rejects_empty_span():
    with pytest.raises(ValueError):
        N.predict_pair(N.Model.zeros(), np.zeros(378), 0.0)


def test_flat_round_trip():
    m = N.Model.init(7)
    v = m.flat()
    m2 = N.Model.zeros()
    m2.set_flat(v)
    assert all(np.array_equal(m.params[n], m2.params[n]) for n in m.names)
    assert m.n_params == v.size


def test_init_is_seeded_and_bounded():
    a, b = N.Model.init(9), N.Model.init(9)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), N.Model.init(10).flat())
    w = a.params["prob.w0"]
    assert np.max(np.abs(w)) <= np.sqrt(6 / (378 + 256))


def test_factorized_forward_equals_explicit_embedding(scene):
    model = N.Model.init(5)
    prep = N.prepare_record(scene, model.config)
    logit, sigma, _ = N.forward(model, prep)
    p = model.params
    dense = F.encode_image(prep.rgb, p)
    ray_feat = F.roi_forward(dense, prep.roi_idx)
    colors = dense.reshape(-1, 32)[prep.point_color_idx]
    fused, _ = F.fuse_forward(prep.point_offsets, colors, p)
    vox_feat, _ = F.voxel_forward(fused, prep.seg, prep.starts, p)
    e = prep.embedding(ray_feat, vox_feat)
    assert e.shape == (len(prep.pair_ray), 378)
    want_logit = N.mlp_forward(N.Mlp.from_params(p, "prob"), e)[0][:, 0]
    want_sigma = N.sigmoid(N.mlp_forward(N.Mlp.from_params(p, "off"), e)[0][:, 0])
    assert np.max(np.abs(logit - want_logit)) < 1e-10
    assert np.max(np.abs(sigma - want_sigma)) < 1e-12


def test_restore_empty_mask_is_passthrough(scene):
    out = N.restore(N.Model.init(0), scene, mask=np.zeros(scene.mask_obj.shape, bool))
    assert np.array_equal(out, scene.depth_raw)


def test_restore_copies_non_mask_and_is_deterministic(scene):
    model = N.Model.init(0)
    a = N.restore(model, scene)
    b = N.restore(model, scene)
    assert np.array_equal(a, b)
    off = ~scene.mask_obj
    assert np.array_equal(a[off], scene.depth_raw[off])
    assert np.all(np.isfinite(a)) and np.all(a >= 0)


def test_restore_no_geometry():
    k = CameraIntrinsics.default(32, 32)
    rec = datagen.random_scene(0, 1, k)[1]
    rec.depth_raw = np.zeros_like(rec.depth_raw)
    with pytest.raises(GeometryError, match="no valid geometry"):
        N.restore(N.Model.init(0), rec)


def test_oracle_scorer_recovers_supervised_rays(scene):
    prep = N.prepare_record(scene, N.ModelConfig())
    out = N.restore(N.OracleScorer(scene.depth_gt), scene)
    v, u = prep.ray_pixels[:, 1], prep.ray_pixels[:, 0]
    t_true = scene.depth_gt[v, u] / prep.ray_dirs[:, 2]
    covered = np.array([np.any((prep.t_in[s] <= t) & (t <= prep.t_out[s]))
                        for s, t in zip(prep.pair_slices(), t_true)])
    assert covered.mean() > 0.9
    err = np.abs(out[v, u] - scene.depth_gt[v, u])[covered]
    assert err.max() < 1e-12


def test_hand_keypoints_affect_masked_prediction(scene):
    model = N.Model.init(0)
    base = N.restore(model, scene)
    moved = replace(scene, keypoints=scene.keypoints + np.array([0.01, 0.0, 0.0]))
    out = N.restore(model, moved)
    m = scene.mask_obj
    assert np.any(out[m] != base[m])


def test_hand_feature_off_ignores_keypoints(scene):
    model = N.Model.init(0, N.ModelConfig(hand_feature="off"))
    a = N.restore(model, scene)
    b = N.restore(model, replace(scene, keypoints=scene.keypoints + 0.01))
    assert np.array_equal(a, b)


def test_select_pairs_ties_go_to_nearest(scene):
    prep = N.prepare_record(scene, N.ModelConfig())
    sel = N.select_pairs(prep, np.zeros(len(prep.pair_ray)))
    has = prep.ray_count > 0
    assert np.array_equal(sel[has], prep.ray_first[has])
    assert np.all(sel[~has] == -1)
