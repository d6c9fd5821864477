"""Matching-cost oracles: weighted NCC, gradient term, reprojection term."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mvstereo import cost, geometry, imaging
from mvstereo.segmentation import deform_patch


def _front_cam(cx=0.0, f=100.0, w=64, h=48):
    K = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    return geometry.CameraModel(K, np.eye(3), np.array([cx, 0.0, 0.0]), w, h)


def _textured(rng, w=64, h=48):
    base = rng.random((h, w)).astype(np.float32)
    return imaging.ImageGrid.from_array(base)


FRONTO = np.array([0.0, 0.0, -1.0])


# ---------------------------------------------------------------------------
# weights and correlation


def test_bilateral_weights_formula(rng):
    vals = rng.random(10)
    offs = rng.integers(-5, 6, size=(10, 2))
    w = cost.bilateral_weights(vals, 0.5, offs, sigma_c=0.1, sigma_s=5.5)
    for i in range(10):
        expect = math.exp(
            -abs(vals[i] - 0.5) / 0.1 - math.hypot(*offs[i]) / 5.5
        )
        assert w[i] == pytest.approx(expect, rel=1e-12)


def test_weighted_correlation_uniform_weights_is_pearson(rng):
    for _ in range(50):
        a = rng.random(30)
        b = rng.random(30)
        rho = cost.weighted_correlation(a, b, np.ones(30))
        expect = np.corrcoef(a, b)[0, 1]
        assert rho == pytest.approx(expect, abs=1e-12)


def test_weighted_correlation_scale_shift_invariance(rng):
    a = rng.random(25)
    w = rng.random(25) + 0.1
    b = 3.0 * a + 0.7
    assert cost.weighted_correlation(a, b, w) == pytest.approx(1.0, abs=1e-12)
    assert cost.weighted_correlation(a, -2.0 * a + 1.0, w) == pytest.approx(-1.0, abs=1e-12)


def test_weighted_correlation_degenerate():
    assert cost.weighted_correlation(np.ones(10), np.arange(10.0), np.ones(10)) is None
    assert cost.weighted_correlation(np.arange(10.0), np.ones(10), np.ones(10)) is None
    assert cost.weighted_correlation(np.arange(10.0), np.arange(10.0), np.zeros(10)) is None


def test_weighted_correlation_weighted_oracle(rng):
    """Brute-force evaluation of the weighted moments."""
    a = rng.random(20)
    b = rng.random(20)
    w = rng.random(20)
    sw = w.sum()
    mr = (w * a).sum() / sw
    ms = (w * b).sum() / sw
    var_r = (w * (a - mr) ** 2).sum() / sw
    var_s = (w * (b - ms) ** 2).sum() / sw
    cov = (w * (a - mr) * (b - ms)).sum() / sw
    expect = cov / math.sqrt(var_r * var_s)
    assert cost.weighted_correlation(a, b, w) == pytest.approx(expect, abs=1e-12)


# ---------------------------------------------------------------------------
# deformed-window NCC


def test_ncc_deformed_perfect_integer_disparity(rng):
    """A fronto-parallel plane with integer disparity gives (near) zero cost."""
    f, depth, baseline = 100.0, 2.0, 0.08
    disparity = f * baseline / depth  # = 4 px exactly
    assert disparity == pytest.approx(4.0)
    ref_cam = _front_cam(0.0, f=f)
    src_cam = _front_cam(baseline, f=f)
    ref = _textured(rng)
    shifted = np.roll(ref.samples[:, :, 0], -4, axis=1)  # src(x) = ref(x + 4)
    src = imaging.ImageGrid.from_array(shifted)
    patch = deform_patch((10, 10, 10, 10), 11)
    h = geometry.PlaneHypothesis(depth, FRONTO)
    c = cost.ncc_deformed(ref, src, ref_cam, src_cam, (30, 24), h, patch)
    assert c < 1e-8
    # a wrong depth on the same texture scores clearly worse
    c_bad = cost.ncc_deformed(
        ref, src, ref_cam, src_cam, (30, 24), geometry.PlaneHypothesis(1.4, FRONTO), patch
    )
    assert c_bad > c + 0.05


def test_ncc_deformed_sentinel_when_warp_leaves_source(rng):
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(3.0)  # huge baseline pushes the warp far off image
    ref = _textured(rng)
    src = _textured(rng)
    patch = deform_patch((10, 10, 10, 10), 11)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    assert cost.ncc_deformed(ref, src, ref_cam, src_cam, (5, 24), h, patch) == cost.SENTINEL_COST


def test_ncc_deformed_sentinel_on_textureless(rng):
    ref = imaging.ImageGrid.from_array(np.full((48, 64), 0.5, np.float32))
    src = imaging.ImageGrid.from_array(np.full((48, 64), 0.5, np.float32))
    patch = deform_patch((10, 10, 10, 10), 11)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    c = cost.ncc_deformed(ref, src, _front_cam(0.0), _front_cam(0.05), (30, 24), h, patch)
    assert c == cost.SENTINEL_COST


def test_ncc_deformed_min_samples(rng):
    """Degenerate 1-sample patch cannot reach the default minimum."""
    ref, src = _textured(rng), _textured(rng)
    patch = deform_patch((0, 0, 0, 0), 11)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    c = cost.ncc_deformed(ref, src, _front_cam(0.0), _front_cam(0.01), (30, 24), h, patch)
    assert c == cost.SENTINEL_COST


def test_ncc_deformed_range(rng):
    """Cost stays in [0, 2] over random valid hypotheses."""
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(0.05)
    ref, src = _textured(rng), _textured(rng)
    patch = deform_patch((8, 4, 6, 2), 11)
    for _ in range(100):
        d = float(rng.uniform(0.5, 5.0))
        ray = geometry.pixel_ray(ref_cam.K, np.array([32.0, 24.0]))
        n = -ray + rng.uniform(-0.5, 0.5, size=3)
        n /= np.linalg.norm(n)
        if n @ ray >= 0:
            continue
        c = cost.ncc_deformed(
            ref, src, ref_cam, src_cam, (32, 24), geometry.PlaneHypothesis(d, n), patch
        )
        assert 0.0 <= c <= cost.SENTINEL_COST


# ---------------------------------------------------------------------------
# multi-scale mean, gradient term, reprojection term


def test_multi_scale_cost_mean_of_valid():
    s = cost.SENTINEL_COST
    assert cost.multi_scale_cost([0.2, 0.4, 0.6]) == pytest.approx(0.4)
    assert cost.multi_scale_cost([0.2, s, 0.6]) == pytest.approx(0.4)
    assert cost.multi_scale_cost([s, s, s]) == s
    assert cost.multi_scale_cost([0.5]) == pytest.approx(0.5)


def test_projection_color_error_modes(rng):
    ref = _textured(rng, 16, 16)
    src = _textured(rng, 16, 16)
    # independent Laplacian difference at integer pixels
    g_ref = imaging.laplacian_at(ref, (5, 6))
    g_src = imaging.laplacian_at(src, (9, 7))
    diff = float(np.linalg.norm(g_src - g_ref))
    lit = cost.projection_color_error(ref, src, (5.0, 6.0), (9.0, 7.0), tau=2.0)
    cap = cost.projection_color_error(ref, src, (5.0, 6.0), (9.0, 7.0), tau=2.0, mode="capped")
    assert lit == pytest.approx(max(diff, 2.0), abs=1e-6)
    assert cap == pytest.approx(min(diff, 2.0), abs=1e-6)
    # tiny tau exposes the raw difference in literal mode
    raw = cost.projection_color_error(ref, src, (5.0, 6.0), (9.0, 7.0), tau=1e-9)
    assert raw == pytest.approx(diff, abs=1e-6)


def test_projection_color_error_out_of_bounds(rng):
    ref = _textured(rng, 16, 16)
    src = _textured(rng, 16, 16)
    assert cost.projection_color_error(ref, src, (5.0, 6.0), (99.0, 7.0), tau=2.0) == 2.0
    with pytest.raises(ValueError):
        cost.projection_color_error(ref, src, (0, 0), (0, 0), 2.0, mode="bogus")


def test_reprojection_error_consistent_geometry():
    """A source map that matches the plane reprojects back exactly."""
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(0.05)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    src_map = np.full((48, 64), 2.0)
    err = cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, src_map)
    assert err == pytest.approx(0.0, abs=1e-9)


def test_reprojection_error_wrong_depth_truncated():
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(0.05)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    src_map = np.full((48, 64), 1.0)  # inconsistent source estimate
    err = cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, src_map, tau_rp=2.0)
    assert 0.0 < err <= 2.0
    tight = cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, src_map, tau_rp=0.5)
    assert tight == 0.5  # truncation engages


def test_reprojection_error_failure_paths():
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(0.05)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    assert cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, None) == 2.0
    bad = np.full((48, 64), -1.0)
    assert cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, bad) == 2.0
    nan_map = np.full((48, 64), np.nan)
    assert cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, nan_map) == 2.0
    far = geometry.PlaneHypothesis(2.0, FRONTO)
    assert (
        cost.reprojection_error(ref_cam, _front_cam(50.0), (30.0, 24.0), far, np.full((48, 64), 2.0))
        == 2.0
    )


def test_reprojection_error_level_scale():
    """Coarse-level pixel distances are reported in level-0 units."""
    ref_cam = _front_cam(0.0)
    src_cam = _front_cam(0.05)
    h = geometry.PlaneHypothesis(2.0, FRONTO)
    src_map = np.full((48, 64), 1.3)
    e1 = cost.reprojection_error(ref_cam, src_cam, (30.0, 24.0), h, src_map, tau_rp=50.0)
    e2 = cost.reprojection_error(
        ref_cam, src_cam, (30.0, 24.0), h, src_map, tau_rp=50.0, level_scale=2.0
    )
    assert e2 == pytest.approx(2.0 * e1, rel=1e-12)


def test_aggregate_linear():
    cc = cost.CostComponents(c_ms=0.3, c_rp=1.5, c_pc=2.0)
    hp = cost.Hyperparameters(w_ms=0.8, w_rp=0.1, w_pc=0.1)
    assert cost.aggregate(cc, hp) == pytest.approx(0.8 * 0.3 + 0.1 * 1.5 + 0.1 * 2.0)
    np.testing.assert_allclose(hp.weights() @ cc.as_array(), cost.aggregate(cc, hp))
    hp2 = hp.with_weights([0.5, 0.25, 0.25])
    assert (hp2.w_ms, hp2.w_rp, hp2.w_pc) == (0.5, 0.25, 0.25)
