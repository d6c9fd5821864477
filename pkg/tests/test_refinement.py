"""Spherical normal perturbation, depth proposals, and the per-pixel step."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mvstereo import refinement
from mvstereo.errors import InvalidFrameError
from mvstereo.refinement import TangentFrame


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _random_normal(rng):
    return _unit(rng.normal(size=3))


# ---------------------------------------------------------------------------
# tangent frames


def test_random_tangent_frame_is_orthonormal(rng):
    for _ in range(200):
        n = _random_normal(rng)
        fr = refinement.random_tangent_frame(n, rng)
        fr.check_against(n)  # raises on failure
        # right-handed: e2 completes the frame
        np.testing.assert_allclose(np.cross(n, fr.e1), fr.e2, atol=1e-12)


def test_random_tangent_frame_deterministic_under_seed():
    n = _unit([0.2, -0.4, -1.0])
    a = refinement.random_tangent_frame(n, np.random.default_rng(42))
    b = refinement.random_tangent_frame(n, np.random.default_rng(42))
    np.testing.assert_array_equal(a.e1, b.e1)
    np.testing.assert_array_equal(a.e2, b.e2)


def test_check_against_rejects_bad_frames():
    n = np.array([0.0, 0.0, -1.0])
    with pytest.raises(InvalidFrameError):
        TangentFrame(e1=np.array([1.0, 0.0, 0.1]), e2=np.array([0.0, 1.0, 0.0])).check_against(n)
    with pytest.raises(InvalidFrameError):
        TangentFrame(e1=np.array([2.0, 0.0, 0.0]), e2=np.array([0.0, 1.0, 0.0])).check_against(n)
    with pytest.raises(InvalidFrameError):
        # orthogonal to n but not to each other
        TangentFrame(e1=np.array([1.0, 0.0, 0.0]), e2=_unit([1.0, 1.0, 0.0])).check_against(n)


# ---------------------------------------------------------------------------
# rotations


def _scipy_rotate(n, frame, theta1, theta2):
    r1 = Rotation.from_rotvec(np.asarray(frame.e1) * theta1)
    r2 = Rotation.from_rotvec(np.asarray(frame.e2) * theta2)
    return r2.apply(r1.apply(n))


def test_single_axis_rotation_matches_rodrigues(rng):
    # theta2 = 0: both modes are the exact rotation about e1
    for _ in range(100):
        n = _random_normal(rng)
        fr = refinement.random_tangent_frame(n, rng)
        theta = rng.uniform(-1.2, 1.2)
        want = _scipy_rotate(n, fr, theta, 0.0)
        for full in (False, True):
            got = refinement.rotate_normal(n, fr, theta, 0.0, full_rodrigues=full)
            np.testing.assert_allclose(got, want, atol=1e-12)


def test_full_rodrigues_matches_scipy_composition(rng):
    for _ in range(200):
        n = _random_normal(rng)
        fr = refinement.random_tangent_frame(n, rng)
        t1, t2 = rng.uniform(-1.2, 1.2, size=2)
        want = _scipy_rotate(n, fr, t1, t2)
        got = refinement.rotate_normal(n, fr, t1, t2, full_rodrigues=True)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_two_term_rotation_error_is_bounded(rng):
    # dropping (1-cos t2)(e2 . n1) e2 perturbs the exact result by at most
    # that vector's length (before the renormalization, which contracts)
    for _ in range(200):
        n = _random_normal(rng)
        fr = refinement.random_tangent_frame(n, rng)
        t1, t2 = rng.uniform(-0.6, 0.6, size=2)
        exact = _scipy_rotate(n, fr, t1, t2)
        got = refinement.rotate_normal(n, fr, t1, t2)
        n1 = _scipy_rotate(n, fr, t1, 0.0)
        dropped = (1.0 - math.cos(t2)) * abs(float(fr.e2 @ n1))
        assert np.linalg.norm(got - exact) <= 2.0 * dropped + 1e-12
        assert np.linalg.norm(got) == pytest.approx(1.0, abs=1e-12)


def test_two_term_equals_full_when_first_angle_is_zero(rng):
    # with theta1 = 0 the once-rotated normal stays orthogonal to e2,
    # so the dropped term is exactly zero
    for _ in range(50):
        n = _random_normal(rng)
        fr = refinement.random_tangent_frame(n, rng)
        t2 = rng.uniform(-1.0, 1.0)
        a = refinement.rotate_normal(n, fr, 0.0, t2)
        b = refinement.rotate_normal(n, fr, 0.0, t2, full_rodrigues=True)
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_rotate_normal_validates_frame():
    n = np.array([0.0, 0.0, -1.0])
    bad = TangentFrame(e1=np.array([1.0, 0.0, 0.5]), e2=np.array([0.0, 1.0, 0.0]))
    with pytest.raises(InvalidFrameError):
        refinement.rotate_normal(n, bad, 0.1, 0.1)


# ---------------------------------------------------------------------------
# schedules and proposals


def test_angle_schedule_ranges():
    rng = np.random.default_rng(3)
    for i, bound in ((1, 20.0), (2, 10.0), (3, 5.0)):
        draws = np.concatenate(
            [refinement.angle_schedule(i, 3, rng, count=2) for _ in range(500)]
        )
        assert draws.min() >= 0.0
        assert draws.max() < bound
        assert draws.max() > 0.8 * bound  # actually fills the range


def test_angle_schedule_rejects_out_of_range():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        refinement.angle_schedule(0, 3, rng)
    with pytest.raises(ValueError):
        refinement.angle_schedule(4, 3, rng)


def test_propose_depths_in_interval(rng):
    for _ in range(100):
        lo = rng.uniform(0.5, 2.0)
        hi = lo + rng.uniform(0.0, 2.0)
        cur, draw = refinement.propose_depths(1.3, (lo, hi), rng)
        assert cur == 1.3
        assert lo <= draw <= hi


def test_propose_depths_rejects_inverted_interval(rng):
    with pytest.raises(ValueError):
        refinement.propose_depths(1.0, (2.0, 1.0), rng)


# ---------------------------------------------------------------------------
# descent frames


def test_descend_frame_follows_projected_step(rng):
    for _ in range(100):
        n_old = _random_normal(rng)
        fr = refinement.random_tangent_frame(n_old, rng)
        n_new = refinement.rotate_normal(n_old, fr, 0.3, -0.2)
        out = refinement.descend_frame(n_old, n_new, rng)
        out.check_against(n_new)
        step = n_new - n_old
        want = _unit(step - (step @ n_new) * n_new)
        np.testing.assert_allclose(out.e1, want, atol=1e-12)


def test_descend_frame_raw_keeps_unprojected_direction(rng):
    n_old = _unit([0.1, 0.0, -1.0])
    n_new = _unit([-0.3, 0.2, -1.0])
    out = refinement.descend_frame(n_old, n_new, rng, raw=True)
    np.testing.assert_allclose(out.e1, _unit(n_new - n_old), atol=1e-12)
    # raw mode trades the orthogonality guarantee for literalness
    assert abs(float(out.e1 @ n_new)) > 1e-6


def test_descend_frame_degenerate_falls_back_to_random(rng):
    n = _unit([0.4, -0.1, -1.0])
    out = refinement.descend_frame(n, n, rng)
    out.check_against(n)


# ---------------------------------------------------------------------------
# additive baseline


def test_perturb_normal_additive_unit_and_bounded(rng):
    for _ in range(100):
        n = _random_normal(rng)
        out = refinement.perturb_normal_additive(n, rng, scale=0.25)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(out - n) <= np.linalg.norm(np.full(3, 0.25)) + 1.0


def test_perturb_normal_additive_degenerate_returns_input():
    n = np.array([0.0, 0.0, -1.0])

    class _Cancel:
        def uniform(self, lo, hi, size):
            return -n

    out = refinement.perturb_normal_additive(n, _Cancel())
    np.testing.assert_array_equal(out, n)


# ---------------------------------------------------------------------------
# per-pixel refinement step


_RAY = np.array([0.0, 0.0, 1.0])
_N = np.array([0.0, 0.0, -1.0])


def _frame():
    return TangentFrame(e1=np.array([1.0, 0.0, 0.0]), e2=np.array([0.0, 1.0, 0.0]))


def test_refine_pixel_candidate_order_and_argmin():
    calls = []

    def eval_cost(d, n):
        calls.append((d, n.copy()))
        return {0: 0.9, 1: 0.3, 2: 0.5}[len(calls) - 1]

    d, n, c, rotated, changed = refinement.refine_pixel(
        depth=2.0, normal=_N, ray=_RAY, frame=_frame(),
        theta1_deg=8.0, theta2_deg=-5.0, depth_draw=2.4,
        incumbent_cost=1.0, eval_cost=eval_cost,
    )
    # candidates in order: (draw, n), (depth, n2), (draw, n2)
    assert len(calls) == 3
    assert calls[0][0] == 2.4 and np.array_equal(calls[0][1], _N)
    assert calls[1][0] == 2.0 and calls[2][0] == 2.4
    np.testing.assert_array_equal(calls[1][1], calls[2][1])
    assert changed and rotated and c == 0.3 and d == 2.0
    np.testing.assert_array_equal(n, calls[1][1])


def test_refine_pixel_tie_keeps_incumbent():
    d, n, c, rotated, changed = refinement.refine_pixel(
        2.0, _N, _RAY, _frame(), 8.0, -5.0, 2.4, 0.4, lambda dd, nn: 0.4
    )
    assert not changed and not rotated
    assert d == 2.0 and c == 0.4
    np.testing.assert_array_equal(n, _N)


def test_refine_pixel_candidate_tie_keeps_earliest():
    d, n, c, rotated, changed = refinement.refine_pixel(
        2.0, _N, _RAY, _frame(), 8.0, -5.0, 2.4, 1.0, lambda dd, nn: 0.2
    )
    # all three tie below the incumbent: first proposal (draw, old normal) wins
    assert changed and not rotated and d == 2.4
    np.testing.assert_array_equal(n, _N)


def test_refine_pixel_drops_back_facing_rotation():
    calls = []

    def eval_cost(d, n):
        calls.append((d, n.copy()))
        return 5.0

    # 120-degree rotation flips the normal past the horizon for this ray
    refinement.refine_pixel(
        2.0, _N, _RAY, _frame(), 120.0, 0.0, 2.4, 1.0, eval_cost
    )
    assert len(calls) == 1  # only (draw, old normal) survived
    assert calls[0][0] == 2.4


@pytest.mark.parametrize("full", [False, True])
def test_refine_pixel_spherical_normal_matches_rotate_normal(full):
    seen = []

    def eval_cost(d, n):
        seen.append(n.copy())
        return 5.0

    refinement.refine_pixel(
        2.0, _N, _RAY, _frame(), 8.0, -5.0, 2.4, 1.0, eval_cost,
        full_rodrigues=full,
    )
    want = refinement.rotate_normal(
        _N, _frame(), math.radians(8.0), math.radians(-5.0), full_rodrigues=full
    )
    # calls: (draw, old normal), then the rotated normal twice
    np.testing.assert_array_equal(seen[1], want)
    np.testing.assert_array_equal(seen[2], want)


def test_refine_pixel_eq9_mode_adds_offsets():
    offsets = np.array([0.1, -0.05, 0.02])
    seen = []

    def eval_cost(d, n):
        seen.append(n.copy())
        return 0.0

    refinement.refine_pixel(
        2.0, _N, _RAY, _frame(), 0.0, 0.0, 2.4, 1.0, eval_cost,
        mode="eq9", additive_offsets=offsets,
    )
    want = _N + offsets
    want = want / np.linalg.norm(want)
    np.testing.assert_allclose(seen[1], want, atol=1e-15)


def test_refine_pixel_eq9_requires_offsets():
    with pytest.raises(ValueError):
        refinement.refine_pixel(
            2.0, _N, _RAY, _frame(), 0.0, 0.0, 2.4, 1.0, lambda d, n: 0.0, mode="eq9"
        )


def test_refine_pixel_unknown_mode():
    with pytest.raises(ValueError):
        refinement.refine_pixel(
            2.0, _N, _RAY, _frame(), 0.0, 0.0, 2.4, 1.0, lambda d, n: 0.0, mode="nope"
        )
