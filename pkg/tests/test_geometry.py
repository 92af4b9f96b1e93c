import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from pupilnet.errors import (
    DegenerateInput,
    EmptyMask,
    InvariantViolation,
    NonSquareInput,
    OutOfRange,
    RejectedByAspect,
    RejectedBySolidity,
    SingularTransform,
)
from pupilnet.geometry import (
    AffineTransform2D,
    Ellipse,
    NormalizedEllipse,
    conic_coefficients,
    denormalize_params,
    fit_ellipse_lsq,
    mask_to_ellipse,
    normalize_params,
    pupil_diameter,
    rasterize_ellipse,
    solidity,
    transform_ellipse,
)

from helpers import angle_diff, ellipse_points, resize_mask


def assert_ellipse_close(got, want, tol=1e-6, angle_tol=1e-6):
    assert got.xc == pytest.approx(want.xc, abs=tol)
    assert got.yc == pytest.approx(want.yc, abs=tol)
    assert got.a == pytest.approx(want.a, abs=tol)
    assert got.b == pytest.approx(want.b, abs=tol)
    if want.a / want.b > 1 + 1e-6:
        assert angle_diff(got.theta, want.theta) < angle_tol


class TestEllipseType:
    def test_canonical_swaps_axes(self):
        e = Ellipse.canonical(10, 10, 5, 8, 30)
        assert (e.a, e.b, e.theta) == (8, 5, 120)

    def test_canonical_wraps_angle(self):
        assert Ellipse.canonical(0, 0, 3, 2, -30).theta == pytest.approx(150)
        assert Ellipse.canonical(0, 0, 3, 2, 540).theta == 0

    def test_circle_reports_zero_angle(self):
        assert Ellipse.canonical(0, 0, 4, 4, 77).theta == 0

    @pytest.mark.parametrize("args", [(0, 0, 2, 3, 0), (0, 0, 3, 0, 0), (0, 0, 3, 2, 180), (math.nan, 0, 3, 2, 0)])
    def test_invariants(self, args):
        with pytest.raises(InvariantViolation):
            Ellipse(*args)

    def test_json_round_trip(self):
        e = Ellipse(1.5, 2.5, 4.0, 3.0, 12.0)
        assert e.to_dict() == {"xc": 1.5, "yc": 2.5, "a": 4.0, "b": 3.0, "theta_deg": 12.0}
        assert Ellipse.from_dict(e.to_dict()) == e

    def test_conic_vanishes_on_boundary(self):
        e = Ellipse(40, 30, 12, 5, 33)
        A, B, C, D, E, F = conic_coefficients(e)
        x, y = ellipse_points(*e.as_tuple(), n=16).T
        np.testing.assert_allclose(A * x * x + B * x * y + C * y * y + D * x + E * y + F, 0, atol=1e-12)

    def test_positive_theta_points_up_on_screen(self):
        # major axis at 45 deg should pass through the upper-right quadrant (smaller y)
        m = rasterize_ellipse(Ellipse(50, 50, 30, 5, 45), 100, 100)
        assert m[35, 65] == 1 and m[65, 65] == 0


class TestFit:
    def test_circle(self):
        pts = ellipse_points(50, 50, 20, 20, 0)
        e = fit_ellipse_lsq(pts)
        assert_ellipse_close(e, Ellipse(50, 50, 20, 20, 0))

    def test_axis_aligned(self):
        pts = ellipse_points(112, 112, 40, 20, 0)
        e = fit_ellipse_lsq(pts)
        assert_ellipse_close(e, Ellipse(112, 112, 40, 20, 0))
        assert angle_diff(e.theta, 0) < 1e-6

    @pytest.mark.parametrize("theta", [10, 45, 90, 135, 170])
    def test_rotated(self, theta):
        e = fit_ellipse_lsq(ellipse_points(80, 60, 30, 12, theta, n=40))
        assert_ellipse_close(e, Ellipse(80, 60, 30, 12, theta))

    def test_five_points(self):
        with pytest.raises(DegenerateInput):
            fit_ellipse_lsq(ellipse_points(50, 50, 20, 10, 0, n=5))

    def test_collinear(self):
        pts = np.column_stack([np.arange(10.0), 2 * np.arange(10.0) + 1])
        with pytest.raises(DegenerateInput):
            fit_ellipse_lsq(pts)

    def test_hyperbola_points_rejected_or_elliptic(self):
        x = np.linspace(1, 5, 20)
        pts = np.column_stack([np.r_[x, -x], np.r_[1 / x, -1 / x]])
        try:
            e = fit_ellipse_lsq(pts)
        except DegenerateInput:
            return
        assert e.a >= e.b > 0

    @settings(max_examples=60, deadline=None)
    @given(
        a=st.floats(5, 60),
        ratio=st.floats(0.3, 0.95),
        theta=st.floats(0, 179.9),
        dx=st.floats(-300, 300),
        dy=st.floats(-300, 300),
        rot=st.floats(-180, 180),
    )
    def test_translation_rotation_covariance(self, a, ratio, theta, dx, dy, rot):
        b = a * ratio
        rng = np.random.default_rng(0)
        pts = ellipse_points(100, 90, a, b, theta, n=30) + rng.normal(0, 0.3, (30, 2))
        base = fit_ellipse_lsq(pts)
        t = AffineTransform2D.rotation(rot, 100, 90).then(AffineTransform2D.translate(dx, dy))
        moved = fit_ellipse_lsq(t.apply(pts))
        want = transform_ellipse(base, t)
        scale = max(a, 1.0)
        assert abs(moved.xc - want.xc) <= 1e-6 * scale + 1e-6 * abs(want.xc)
        assert abs(moved.yc - want.yc) <= 1e-6 * scale + 1e-6 * abs(want.yc)
        assert moved.a == pytest.approx(want.a, rel=1e-6)
        assert moved.b == pytest.approx(want.b, rel=1e-6)
        assert angle_diff(moved.theta, want.theta) < 1e-5


class TestMaskToEllipse:
    def test_disk(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 30, 30, 0), 224, 224)
        e = mask_to_ellipse(mask)
        assert abs(e.xc - 112) < 0.5 and abs(e.yc - 112) < 0.5
        assert e.a == pytest.approx(30, rel=0.02) and e.b == pytest.approx(30, rel=0.02)

    def test_accepts_255_masks(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 30, 20, 10), 224, 224) * 255
        e = mask_to_ellipse(mask)
        assert e.a == pytest.approx(30, rel=0.02)

    def test_empty(self):
        with pytest.raises(EmptyMask):
            mask_to_ellipse(np.zeros((224, 224), np.uint8))

    def test_elongated_rejected_by_aspect(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 60, 10, 20), 224, 224)
        with pytest.raises(RejectedByAspect) as info:
            mask_to_ellipse(mask)
        # fitted ratio agrees with the generating ratio 1/6
        assert info.value.value == pytest.approx(10 / 60, abs=0.01)

    def test_concave_rejected_by_solidity(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 50, 50, 0), 224, 224)
        mask[rasterize_ellipse(Ellipse(112, 150, 50, 50, 0), 224, 224) == 1] = 0
        mask[:, 108:116] = 1
        mask[:50] = 0
        with pytest.raises(RejectedBySolidity):
            mask_to_ellipse(mask)

    def test_uses_largest_component(self):
        mask = rasterize_ellipse(Ellipse(80, 80, 25, 20, 30), 224, 224)
        mask |= rasterize_ellipse(Ellipse(180, 180, 5, 5, 0), 224, 224)
        e = mask_to_ellipse(mask)
        assert abs(e.xc - 80) < 0.5 and abs(e.yc - 80) < 0.5

    def test_interior_holes_ignored_for_fit(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 30, 25, 0), 224, 224)
        mask[110:114, 110:114] = 0
        e = mask_to_ellipse(mask)
        assert e.a == pytest.approx(30, rel=0.02)


class TestSolidity:
    def test_disk(self):
        assert solidity(rasterize_ellipse(Ellipse(112, 112, 40, 40, 0), 224, 224)) == pytest.approx(1.0, abs=0.02)

    def test_crescent_matches_hull_oracle(self):
        mask = rasterize_ellipse(Ellipse(112, 112, 60, 60, 0), 224, 224)
        mask[rasterize_ellipse(Ellipse(112, 142, 40, 40, 0), 224, 224) == 1] = 0
        rows, cols = np.nonzero(mask)
        corners = np.concatenate([np.column_stack([cols + dx, rows + dy]) for dx in (0, 1) for dy in (0, 1)])
        hull = ConvexHull(corners)
        oracle = mask.sum() / hull.volume
        assert oracle == pytest.approx(0.6, abs=0.05)
        assert solidity(mask) == pytest.approx(oracle, abs=0.03)

    def test_empty(self):
        with pytest.raises(EmptyMask):
            solidity(np.zeros((10, 10), np.uint8))


class TestNormalization:
    def test_examples(self):
        n = normalize_params(Ellipse(112, 112, 56, 28, 90), 224, 224)
        np.testing.assert_allclose(n.as_array(), [0.5, 0.5, 0.5, 0.25, 0.5])
        n = normalize_params(Ellipse(112, 112, 56, 28, 0), 224, 224)
        np.testing.assert_allclose(n.as_array(), [0.5, 0.5, 0.5, 0.25, 0.0])

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            normalize_params(Ellipse(300, 150, 40, 20, 45), 224, 224)

    def test_non_square(self):
        with pytest.raises(NonSquareInput):
            normalize_params(Ellipse(100, 100, 20, 10, 0), 400, 300)

    def test_denormalize(self):
        e = denormalize_params(NormalizedEllipse(0.5, 0.5, 0.5, 0.25, 0.5), 224)
        assert e == Ellipse(112, 112, 56, 28, 90)

    def test_denormalize_minor_exceeds_major(self):
        with pytest.raises(InvariantViolation):
            denormalize_params(NormalizedEllipse(0.5, 0.5, 0.25, 0.5, 0.0), 224)

    @settings(max_examples=200, deadline=None)
    @given(
        xc=st.floats(30, 194), yc=st.floats(30, 194), a=st.floats(1, 28),
        ratio=st.floats(0.1, 1.0), theta=st.floats(0, 179.999),
    )
    def test_round_trip(self, xc, yc, a, ratio, theta):
        e = Ellipse.canonical(xc, yc, a, a * ratio, theta)
        back = denormalize_params(normalize_params(e, 224, 224), 224)
        np.testing.assert_allclose(back.as_tuple(), e.as_tuple(), rtol=0, atol=1e-12)


class TestTransform:
    def test_identity(self):
        e = Ellipse(40, 50, 20, 10, 33)
        assert transform_ellipse(e, AffineTransform2D.identity()) == e

    def test_singular(self):
        with pytest.raises(SingularTransform):
            transform_ellipse(Ellipse(40, 50, 20, 10, 33), AffineTransform2D(np.diag([1.0, 0.0])))

    @pytest.mark.parametrize("theta", [0, 25, 90, 140])
    def test_hflip_against_refit(self, theta):
        e = Ellipse(60, 100, 30, 15, theta)
        flip = AffineTransform2D.hflip(224)
        got = transform_ellipse(e, flip)
        assert got.as_tuple() == pytest.approx((164, 100, 30, 15, (180 - theta) % 180))
        oracle = fit_ellipse_lsq(flip.apply(ellipse_points(*e.as_tuple(), n=50)))
        assert_ellipse_close(got, oracle, tol=1e-6, angle_tol=1e-6)

    def test_anisotropic_resize_against_raster_refit(self):
        e = Ellipse(200, 150, 50, 30, 30)
        t = AffineTransform2D.scale(224 / 400, 224 / 300)
        got = transform_ellipse(e, t)
        resized = resize_mask(rasterize_ellipse(e, 300, 400), 224, 224)
        oracle = mask_to_ellipse(resized)
        assert abs(got.xc - oracle.xc) < 1 and abs(got.yc - oracle.yc) < 1
        assert got.a == pytest.approx(oracle.a, rel=0.02)
        assert got.b == pytest.approx(oracle.b, rel=0.02)
        assert angle_diff(got.theta, oracle.theta) < 2

    def test_anisotropic_resize_against_point_refit(self):
        e = Ellipse(200, 150, 50, 30, 30)
        t = AffineTransform2D.scale(224 / 400, 224 / 300)
        oracle = fit_ellipse_lsq(t.apply(ellipse_points(*e.as_tuple(), n=80)))
        assert_ellipse_close(transform_ellipse(e, t), oracle, tol=1e-8, angle_tol=1e-6)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_rot90_matches_numpy(self, k):
        e = Ellipse(70, 40, 25, 12, 20)
        mask = rasterize_ellipse(e, 120, 160)
        t = AffineTransform2D.rot90(k, 160, 120)
        want = transform_ellipse(e, t)
        h, w = (120, 160) if k == 2 else (160, 120)
        np.testing.assert_array_equal(np.rot90(mask, k), rasterize_ellipse(want, h, w))

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(-2, 2), min_size=12, max_size=12))
    def test_composition(self, vals):
        m1 = np.array(vals[0:4]).reshape(2, 2) + 3 * np.eye(2)
        m2 = np.array(vals[4:8]).reshape(2, 2) + 3 * np.eye(2)
        t1 = AffineTransform2D(m1, np.array(vals[8:10]) * 10)
        t2 = AffineTransform2D(m2, np.array(vals[10:12]) * 10)
        e = Ellipse(30, 20, 9, 4, 35)
        two_step = transform_ellipse(transform_ellipse(e, t1), t2)
        direct = transform_ellipse(e, t1.then(t2))
        np.testing.assert_allclose(two_step.as_tuple()[:4], direct.as_tuple()[:4], rtol=1e-9, atol=1e-9)
        if direct.a / direct.b > 1.001:
            assert angle_diff(two_step.theta, direct.theta) < 1e-7

    @settings(max_examples=60, deadline=None)
    @given(rot=st.floats(-360, 360), s=st.floats(0.2, 5), dx=st.floats(-50, 50))
    def test_diameter_under_rotation_and_scale(self, rot, s, dx):
        e = Ellipse(60, 70, 22, 13, 50)
        rotated = transform_ellipse(e, AffineTransform2D.rotation(rot, 10, 20).then(AffineTransform2D.translate(dx, 0)))
        assert pupil_diameter(rotated) == pytest.approx(pupil_diameter(e), rel=1e-12)
        scaled = transform_ellipse(e, AffineTransform2D.scale(s))
        assert pupil_diameter(scaled) == pytest.approx(s * pupil_diameter(e), rel=1e-9)


class TestDiameter:
    def test_examples(self):
        assert pupil_diameter(Ellipse(0, 0, 30, 20, 0)) == 50
        assert pupil_diameter(Ellipse(0, 0, 7, 7, 0)) == 14
        assert pupil_diameter(Ellipse(0, 0, 56, 28, 0)) == 84


def test_raster_recovery_sample():
    from helpers import random_interior_ellipse

    rng = np.random.default_rng(11)
    for _ in range(40):
        e = random_interior_ellipse(rng)
        got = mask_to_ellipse(rasterize_ellipse(e, 224, 224))
        assert abs(got.xc - e.xc) < 0.5 and abs(got.yc - e.yc) < 0.5
        assert got.a == pytest.approx(e.a, rel=0.02) and got.b == pytest.approx(e.b, rel=0.02)
