from dataclasses import replace

import numpy as np
import pytest

from ndtscene.config import PipelineConfig
from ndtscene.encoder import encode_all, encode_scale, lift_reference_features, positional_encoding
from ndtscene.io import CameraView, PointCloud
from ndtscene.ndt import build_multiscale, build_ndt_grid
from ndtscene.nn import autodiff as ad
from ndtscene.nn.gradcheck import finite_diff_check
from ndtscene.pipeline import init_params


def _cloud(seed=0, n=400):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0, 2.0, (n, 3)), rng.uniform(0, 1, (n, 3)))


def test_single_cell_grid(small_config):
    params = init_params(small_config)
    grid = build_ndt_grid(PointCloud(np.array([[0.1, 0.1, 0.1], [0.2, 0.15, 0.1]])), 1.0)
    with ad.no_grad():
        f = encode_scale(grid, params, 0, small_config)
    assert f.values.shape == (1, small_config.feature_dim)
    assert np.all(np.isfinite(f.values.data))


def test_rows_follow_canonical_cell_order(small_config):
    params = init_params(small_config)
    grid = build_multiscale(_cloud(), small_config.scales).finest
    with ad.no_grad():
        f = encode_scale(grid, params, 2, small_config)
    np.testing.assert_array_equal(f.cell_order, grid.indices)
    keys = [tuple(r) for r in f.cell_order]
    assert keys == sorted(keys)


def test_presentation_order_does_not_matter(small_config):
    params = init_params(small_config)
    cloud = _cloud(1)
    perm = np.random.default_rng(2).permutation(cloud.count)
    shuffled = PointCloud(cloud.positions[perm], cloud.colors[perm])
    a = build_multiscale(cloud, small_config.scales).finest
    b = build_multiscale(shuffled, small_config.scales).finest
    with ad.no_grad():
        fa = encode_scale(a, params, 2, small_config).values.data
        fb = encode_scale(b, params, 2, small_config).values.data
    assert np.abs(fa - fb).max() <= 1e-9


def test_rigid_translation_invariance(small_config):
    params = init_params(small_config)
    base = _cloud(3)
    # grid-aligned shift keeps cell membership, so only the centering must cancel
    shift = np.array([12.0, -3.2, 40.0])
    moved = PointCloud(base.positions + shift, base.colors)
    with ad.no_grad():
        fa = encode_all(build_multiscale(base, small_config.scales).grids, params, small_config)
        fb = encode_all(build_multiscale(moved, small_config.scales).grids, params, small_config)
    for a, b in zip(fa, fb):
        assert np.abs(a.values.data - b.values.data).max() <= 1e-9


def test_threaded_encode_is_identical(small_config):
    params = init_params(small_config)
    grids = build_multiscale(_cloud(4), small_config.scales).grids
    with ad.no_grad():
        one = encode_all(grids, params, small_config, threads=1)
    with ad.no_grad():
        many = encode_all(grids, params, small_config, threads=3)
    for a, b in zip(one, many):
        assert a.values.data.tobytes() == b.values.data.tobytes()


def test_shape_mismatch_rejected(small_config):
    params = init_params(small_config)
    grid = build_ndt_grid(_cloud(), 0.5)
    with pytest.raises(ValueError, match="shape"):
        encode_scale(grid, params, 0, replace(small_config, feature_dim=8, heads=4))
    with pytest.raises(KeyError):
        encode_scale(grid, params, 9, small_config)


def test_positional_encoding_layout():
    code = positional_encoding(np.array([[0.0, 0.0, 0.0]]), 16)
    assert code.shape == (1, 16)
    # two frequencies per axis: sin(0) = 0, cos(0) = 1, and 4 zero-padded columns
    np.testing.assert_array_equal(code[0, :12], [0, 1, 0, 1] * 3)
    np.testing.assert_array_equal(code[0, 12:], 0)


def test_encoder_gradient():
    cfg = PipelineConfig(scales=(0.5,), query_count=2, feature_dim=8, llm_dim=4,
                         encoder_depth=1, heads=2, ffn_ratio=2, seed=5)
    params = init_params(cfg)
    rng = np.random.default_rng(6)
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 1], [1, 1, 0], [2, 0, 1]]) * 0.5
    pts = (corners[:, None, :] + rng.uniform(0.05, 0.45, (5, 6, 3))).reshape(-1, 3)
    grid = build_ndt_grid(PointCloud(pts, rng.uniform(0, 1, (30, 3))), 0.5)
    probe = rng.normal(size=(len(grid), 8))
    names = [k for k in params if k.startswith("encoder.0.")]
    err = finite_diff_check(
        lambda t: ad.sum(encode_scale(grid, params.bind(t), 0, cfg).values * probe),
        {k: params[k] for k in names}, 1e-5)
    assert err <= 1e-4


# ---------------------------------------------------------------- lifting

def _feature_view(value, w=8, h=8, cx=4.0):
    return CameraView(4.0, 4.0, cx, 4.0, np.eye(4), w, h, np.broadcast_to(value, (h, w, len(value))))


def test_lift_constant_map():
    grid = build_ndt_grid(PointCloud(np.array([[0.1, 0.1, 2.0], [-0.3, 0.2, 3.0]])), 0.25)
    c = np.arange(6.0)
    f = lift_reference_features(grid, [_feature_view(c)], 6)
    np.testing.assert_array_equal(f.values.data, np.tile(c, (2, 1)))


def test_lift_invisible_cell_is_zero():
    grid = build_ndt_grid(PointCloud(np.array([[0.0, 0.0, -2.0]])), 1.0)
    f = lift_reference_features(grid, [_feature_view(np.ones(4))], 4)
    np.testing.assert_array_equal(f.values.data, np.zeros((1, 4)))


def test_lift_two_view_mean():
    grid = build_ndt_grid(PointCloud(np.array([[0.0, 0.0, 2.0]])), 1.0)
    a, b = np.array([1.0, 2.0]), np.array([3.0, 10.0])
    f = lift_reference_features(grid, [_feature_view(a), _feature_view(b)], 2)
    np.testing.assert_array_equal(f.values.data, [(a + b) / 2])


def test_lift_channel_mismatch():
    grid = build_ndt_grid(PointCloud(np.array([[0.0, 0.0, 2.0]])), 1.0)
    with pytest.raises(ValueError, match="channels"):
        lift_reference_features(grid, [_feature_view(np.ones(3))], 4)
