import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from gaze_geom.conic import EllipseParams
from gaze_geom.efe import (
    BoundaryContour,
    LossWeights,
    bce_loss,
    combined_loss,
    efe_gradient,
    efe_loss,
    ellipse_fit_error,
    extract_boundary,
    fit_gt_ellipse,
    loss_terms,
    rasterize_ellipse,
)
from gaze_geom.errors import DegenerateInput, DimensionMismatch, EmptyPredictionWarning

from .oracles import bce_scalar, brute_force_distance, perimeter_pixels

PRED_2X2 = np.array([[0.9, 0.1], [0.8, 0.2]])
GT_2X2 = np.array([[1, 0], [1, 0]])


class TestBCE:
    def test_perfect_prediction(self):
        gt = (np.arange(12).reshape(3, 4) % 3 == 0).astype(int)
        loss = bce_loss(gt.astype(float), gt)
        assert 0 <= loss <= 12 * -math.log(1 - 1e-7) * (1 + 1e-9)

    def test_half_everywhere(self):
        gt = np.zeros((5, 7), dtype=int)
        gt[1:3, 2:5] = 1
        assert bce_loss(np.full((5, 7), 0.5), gt) == pytest.approx(35 * math.log(2), rel=1e-12)

    def test_two_by_two(self):
        expected = -(math.log(0.9) * 2 + math.log(0.8) * 2)
        assert expected == pytest.approx(0.657008, abs=1e-6)
        assert bce_loss(PRED_2X2, GT_2X2) == pytest.approx(expected, rel=1e-12)
        assert bce_loss(PRED_2X2, GT_2X2) == pytest.approx(bce_scalar(PRED_2X2.tolist(), GT_2X2.tolist()), rel=1e-12)

    def test_saturated_is_finite(self):
        assert math.isfinite(bce_loss(np.array([[0.0, 1.0]]), np.array([[1, 0]])))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            bce_loss(np.zeros((2, 3)), np.zeros((3, 2), dtype=int))

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([[1.5]]), np.array([[1]]))
        with pytest.raises(ValueError):
            bce_loss(np.array([[0.5]]), np.array([[2]]))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(float, (6, 8), elements=st.floats(0, 1)),
        arrays(np.uint8, (6, 8), elements=st.integers(0, 1)),
        st.integers(1, 5),
        st.integers(1, 7),
    )
    def test_tiling_decomposition(self, pred, gt, r, c):
        whole = bce_loss(pred, gt)
        parts = sum(
            bce_loss(pred[rs, cs], gt[rs, cs])
            for rs in (slice(0, r), slice(r, 6))
            for cs in (slice(0, c), slice(c, 8))
        )
        assert whole >= 0
        assert whole == pytest.approx(parts, rel=1e-12, abs=1e-12)
        assert whole == pytest.approx(bce_scalar(pred.tolist(), gt.tolist()), rel=1e-9, abs=1e-12)


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


class TestBoundary:
    def test_empty(self):
        assert extract_boundary(np.zeros((8, 8), dtype=int)) == []

    def test_single_pixel(self):
        m = np.zeros((10, 10), dtype=int)
        m[7, 5] = 1
        (c,) = extract_boundary(m)
        assert len(c) == 1
        assert tuple(c.points[0]) == (5.0, 7.0)

    def test_rectangle(self):
        m = np.zeros((12, 16), dtype=int)
        m[2:8, 3:13] = 1  # 10 wide, 6 tall
        (c,) = extract_boundary(m)
        pts = {tuple(p) for p in c.points.astype(int).tolist()}
        assert len(pts) == 28 == len(c)
        expected = {(x, y) for x in range(3, 13) for y in range(2, 8) if x in (3, 12) or y in (2, 7)}
        assert pts == expected
        assert tuple(c.points[0]) == (3.0, 2.0)
        assert _signed_area(c.points) > 0  # clockwise on screen

    def test_touching_border(self):
        m = np.ones((4, 5), dtype=int)
        (c,) = extract_boundary(m)
        assert {tuple(p) for p in c.points.astype(int).tolist()} == perimeter_pixels(m)

    def test_component_order(self):
        m = np.zeros((10, 10), dtype=int)
        m[6:8, 1:3] = 1
        m[2, 7] = 1
        cs = extract_boundary(m)
        assert [tuple(c.points[0]) for c in cs] == [(7.0, 2.0), (1.0, 6.0)]

    @settings(max_examples=150, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
    def test_matches_perimeter_oracle(self, m):
        labels, n = ndimage.label(m, structure=np.ones((3, 3)))
        cs = extract_boundary(m)
        assert len(cs) == n
        for k, c in enumerate(cs, start=1):
            assert c.closed
            assert {tuple(p) for p in c.points.astype(int).tolist()} == perimeter_pixels(labels == k)
            if len(c) > 1:
                step = np.abs(np.diff(np.vstack([c.points, c.points[:1]]), axis=0)).max(axis=1)
                assert np.all(step == 1)  # 8-neighbours, no repeats


class TestEFE:
    def test_points_on_ellipse(self):
        e = EllipseParams(20, 15, 9, 4, 0.4)
        pts = e.sample(100)
        assert efe_loss(pts, e) < 1e-6 * len(pts)

    def test_single_point_circle(self):
        assert efe_loss(np.array([[3.0, 0.0]]), EllipseParams(0, 0, 2, 2)) == pytest.approx(1.0)

    def test_square_against_circle(self):
        side = np.arange(-2, 2)
        pts = np.array(
            [(x, -2) for x in side] + [(2, y) for y in side] + [(-x, 2) for x in side] + [(-2, -y) for y in side],
            dtype=float,
        )
        expected = math.fsum(brute_force_distance(0, 0, 2, 2, 0, q)[0] for q in pts)
        assert efe_loss(BoundaryContour(pts), EllipseParams(0, 0, 2, 2)) == pytest.approx(expected, abs=1e-6)

    def test_empty_prediction(self):
        e = EllipseParams(0, 0, 2, 1)
        res = ellipse_fit_error([], e)
        assert res.empty and res.loss == 0.0 and res.n_points == 0
        with pytest.warns(EmptyPredictionWarning):
            assert efe_loss([], e) == 0.0

    def test_mean_variant(self):
        e = EllipseParams(0, 0, 2, 2)
        pts = np.array([[3.0, 0.0], [0.0, 5.0]])
        assert efe_loss(pts, e, mean=True) == pytest.approx(2.0)

    def test_sums_all_components(self):
        e = EllipseParams(0, 0, 2, 2)
        a = BoundaryContour(np.array([[3.0, 0.0]]))
        b = BoundaryContour(np.array([[0.0, -4.0]]))
        assert efe_loss([a, b], e) == pytest.approx(3.0)

    def test_monotone_push(self):
        e = EllipseParams(40, 40, 15, 10, 0.3)
        (c,) = extract_boundary(rasterize_ellipse(e, 80, 80))
        losses = [efe_loss(c.points + [t, 0.0], e) for t in (1, 2, 4)]
        assert losses[0] < losses[1] < losses[2]

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        e = EllipseParams(0, 0, rng.uniform(5, 20), rng.uniform(2, 5), rng.uniform(0, math.pi))
        pts = e.points_at(rng.uniform(0, 2 * math.pi, 20)) + rng.normal(0, 1.5, (20, 2))
        grad = efe_gradient(pts, e)
        h = 1e-5
        for i in range(len(pts)):
            for j in range(2):
                up, dn = pts.copy(), pts.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd = (efe_loss(up, e) - efe_loss(dn, e)) / (2 * h)
                assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
            assert np.linalg.norm(grad[i]) == pytest.approx(1.0)

    def test_zero_characterization(self):
        e = EllipseParams(5, 5, 4, 3, 1.0)
        on = e.sample(30)
        assert efe_loss(on, e) < 1e-6 * 30
        off = on.copy()
        off[4] += [1e-3, 0]
        assert efe_loss(off, e) > 1e-6

    def test_order_independence(self):
        rng = np.random.default_rng(2)
        e = EllipseParams(0, 0, 30, 20, 0.2)
        pts = rng.uniform(-60, 60, (500, 2))
        base = efe_loss(pts, e)
        for _ in range(5):
            assert efe_loss(pts[rng.permutation(500)], e) == pytest.approx(base, rel=1e-12)


class TestCombined:
    def test_bce_only(self):
        e = EllipseParams(0.5, 0.5, 3, 2)
        assert combined_loss(PRED_2X2, GT_2X2, e, LossWeights(1, 0)) == bce_loss(PRED_2X2, GT_2X2)

    def test_efe_only_on_rasterized_gt(self):
        e = EllipseParams(32, 30, 14, 9, 0.6)
        gt = rasterize_ellipse(e, 64, 64)
        (c,) = extract_boundary(gt)
        loss = combined_loss(gt.astype(float), gt, e, LossWeights(0, 1))
        assert 0 <= loss <= 0.75 * len(c)

    def test_additivity(self):
        e = EllipseParams(3.0, 0.5, 1.0, 1.0)
        # thresholded spot is column x = 0, rows 0 and 1
        d = math.hypot(3.0, 0.5) - 1.0
        expected = bce_loss(PRED_2X2, GT_2X2) + 2 * d
        assert combined_loss(PRED_2X2, GT_2X2, e, LossWeights(1, 1)) == pytest.approx(expected, rel=1e-12)
        terms = loss_terms(PRED_2X2, GT_2X2, e, LossWeights(2.0, 0.5))
        assert terms.total == 2.0 * terms.bce + 0.5 * terms.efe

    def test_empty_prediction_flag(self):
        terms = loss_terms(np.zeros((4, 4)), np.eye(4, dtype=int), EllipseParams(1, 1, 1, 1))
        assert terms.empty_prediction and terms.efe == 0

    def test_threshold(self):
        e = EllipseParams(3.0, 0.5, 1.0, 1.0)
        hi = loss_terms(PRED_2X2, GT_2X2, e, threshold=0.85)
        assert hi.efe == pytest.approx(math.hypot(3.0, 0.5) - 1.0)
        with pytest.raises(ValueError):
            combined_loss(PRED_2X2, GT_2X2, e, threshold=1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            combined_loss(np.zeros((3, 3)), np.zeros((3, 4), dtype=int), EllipseParams(1, 1, 1, 1))

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0, 0)
        with pytest.raises(ValueError):
            LossWeights(-1, 1)

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (10, 10), elements=st.floats(0, 1)), st.floats(0, 3), st.floats(0.01, 3))
    def test_non_negative(self, pred, alpha, beta):
        gt = rasterize_ellipse(EllipseParams(5, 5, 3, 2), 10, 10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyPredictionWarning)
            assert combined_loss(pred, gt, EllipseParams(5, 5, 3, 2), LossWeights(alpha, beta)) >= 0


class TestFitGT:
    def test_disk(self):
        ys, xs = np.mgrid[0:128, 0:128]
        gt = ((xs - 50) ** 2 + (ys - 50) ** 2 <= 400).astype(int)
        e = fit_gt_ellipse(gt)
        assert math.hypot(e.cx - 50, e.cy - 50) < 0.5
        assert abs(e.semi_major - 20) < 0.75 and abs(e.semi_minor - 20) < 0.75

    def test_picks_largest_component(self):
        ys, xs = np.mgrid[0:30, 0:30]
        gt = ((xs - 20) ** 2 + (ys - 20) ** 2 <= 4).astype(int)
        gt[3, 3] = 1
        e = fit_gt_ellipse(gt)
        assert math.hypot(e.cx - 20, e.cy - 20) < 0.5

    def test_three_pixels(self):
        gt = np.zeros((10, 10), dtype=int)
        gt[4, 4:7] = 1
        with pytest.raises(DegenerateInput):
            fit_gt_ellipse(gt)
