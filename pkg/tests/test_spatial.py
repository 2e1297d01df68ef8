import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from upapp.exceptions import AllZero, InvalidPr, NotPoint, NotPolygon
from upapp.geo import Circle, PlanarPoint, Point, Polygon, Topology
from upapp.spatial import (
    SpatialParams,
    gaussian_sigma,
    normalize_spatial,
    relative_prob_poi,
    relative_prob_poi_at,
    relative_prob_roi,
    spatial_scores,
)

from conftest import make_stop, poi, roi, stop_with

O = PlanarPoint(0.0, 0.0)
P = SpatialParams()


def rect(x0, y0, x1, y1):
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


class TestRoi:
    def test_contain(self):
        assert relative_prob_roi(Circle(O, 20), rect(-50, -50, 50, 50), P) == 1.0

    def test_half_covered(self):
        v = relative_prob_roi(Circle(O, 20), rect(0, -50, 100, 50), P)
        assert v == pytest.approx(0.75, abs=1e-3)

    def test_disjoint_at_search_radius(self):
        assert relative_prob_roi(Circle(O, 20), rect(200, -10, 260, 10), P) == pytest.approx(0, abs=1e-12)

    def test_disjoint_linear(self):
        v = relative_prob_roi(Circle(O, 20), rect(110, -10, 160, 10), P)
        assert v == pytest.approx(0.5 * 90 / 180, abs=1e-12)

    def test_clamped_beyond_search_radius(self):
        assert relative_prob_roi(Circle(O, 20), rect(300, -10, 360, 10), P) == 0.0

    def test_point_rejected(self):
        with pytest.raises(NotPolygon):
            relative_prob_roi(Circle(O, 20), Point(O), P)

    @pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
    def test_continuous_at_boundary(self, eps):
        r = 20.0
        inside = relative_prob_roi(Circle(O, r), rect(r - eps, -5, r + 50, 5), P)
        outside = relative_prob_roi(Circle(O, r), rect(r + eps, -5, r + 50, 5), P)
        assert abs(inside - 0.5) < 1e-3 * max(eps, 0.1) * 10 + 1e-3
        assert abs(outside - 0.5) < 1e-2 * eps + 1e-3

    @given(st.floats(-300, 300), st.floats(-300, 300), st.floats(1, 200), st.floats(1, 200), st.floats(1, 150))
    def test_unit_interval(self, x, y, w, h, r):
        v = relative_prob_roi(Circle(O, r), rect(x, y, x + w, y + h), SpatialParams(search_radius=max(200, 2 * r)))
        assert 0.0 <= v <= 1.0


class TestGaussian:
    def test_sigma_100(self):
        s = gaussian_sigma(100, 0.5)
        assert s == pytest.approx(100 / math.sqrt(2 * math.log(2)), abs=1e-12)
        assert s == pytest.approx(84.932, abs=1e-3)
        assert math.exp(-100**2 / (2 * s**2)) == pytest.approx(0.5, abs=1e-9)

    def test_sigma_identity(self):
        assert gaussian_sigma(37.0, math.exp(-0.5)) == pytest.approx(37.0, abs=1e-12)

    def test_sigma_floor_radius(self):
        assert gaussian_sigma(15, 0.5) == pytest.approx(12.740, abs=1e-3)

    @pytest.mark.parametrize("p_r", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_pr(self, p_r):
        with pytest.raises(InvalidPr):
            gaussian_sigma(10, p_r)
        with pytest.raises(InvalidPr):
            SpatialParams(p_r=p_r)

    def test_poi_values(self):
        c = Circle(O, 100)
        assert relative_prob_poi(c, Point(O), P) == 1.0
        assert relative_prob_poi(c, Point(PlanarPoint(100, 0)), P) == pytest.approx(0.5, abs=1e-12)
        v = relative_prob_poi(c, Point(PlanarPoint(0, 200)), P)
        assert v == pytest.approx(0.5**4, abs=1e-12) and v == pytest.approx(0.0625, abs=1e-4)

    def test_poi_rejects_polygon(self):
        with pytest.raises(NotPoint):
            relative_prob_poi(Circle(O, 10), rect(0, 0, 1, 1), P)

    @given(st.floats(0, 500), st.floats(0.01, 50), st.floats(1, 200), st.floats(0.01, 0.99))
    def test_strictly_decreasing(self, d, delta, r, p_r):
        a, b = relative_prob_poi_at(d, r, p_r), relative_prob_poi_at(d + delta, r, p_r)
        assume(a > 1e-300)
        assert b < a and 0 <= b <= 1


class TestNormalize:
    @pytest.mark.parametrize("rel,out", [([0.8], [1.0]), ([0.3, 0.3], [0.5, 0.5]), ([0.2, 0.3, 0.5], [0.2, 0.3, 0.5])])
    def test_examples(self, rel, out):
        assert np.allclose(normalize_spatial(rel), out, atol=1e-12)

    def test_all_zero(self):
        with pytest.raises(AllZero):
            normalize_spatial([0.0, 0.0])

    def test_negative(self):
        with pytest.raises(ValueError):
            normalize_spatial([0.5, -0.1])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, rel, k):
        assume(sum(rel) > 1e-9)
        a, b = normalize_spatial(rel), normalize_spatial([k * r for r in rel])
        assert a.sum() == pytest.approx(1, abs=1e-9)
        assert np.allclose(a, b, rtol=1e-9, atol=1e-15)
        assert int(np.argmax(a)) == int(np.argmax(rel))


class TestCandidateScores:
    def test_mixed_set(self):
        sw, _ = stop_with([
            poi("p", "dining", 20, 0),
            roi("in", "school", [(-100, -100), (100, -100), (100, 100), (-100, 100)]),
            roi("apart", "leisure", [(110, -10), (160, -10), (160, 10), (110, 10)]),
        ], make_stop(radius=20))
        rel, norm = spatial_scores(sw.candidates, 20.0, P)
        got = dict(zip([c.place_id for c in sw.candidates], rel))
        assert got["in"] == 1.0 and got["p"] == pytest.approx(0.5, abs=1e-6)
        assert got["apart"] == pytest.approx(0.25, abs=1e-3)
        assert norm.sum() == pytest.approx(1, abs=1e-12)

    def test_all_zero_falls_back_to_uniform(self):
        sw, _ = stop_with([roi("a", "leisure", [(199, -5), (250, -5), (250, 5), (199, 5)]),
                           roi("b", "school", [(-250, -5), (-199.5, -5), (-199.5, 5), (-250, 5)])])
        # distances sit just under the search radius; a smaller search radius zeroes both
        rel, norm = spatial_scores(sw.candidates, 20.0, SpatialParams(search_radius=150))
        assert rel.tolist() == [0.0, 0.0] and norm.tolist() == [0.5, 0.5]

    def test_degenerate_roi_uses_gaussian(self):
        flat = roi("flat", "leisure", [(10, 0), (30, 0), (20, 0)])
        assert flat.degenerate
        sw, _ = stop_with([flat], make_stop(radius=20))
        rel, _ = spatial_scores(sw.candidates, 20.0, P)
        assert rel[0] == pytest.approx(0.5 ** ((10 / 20) ** 2), abs=1e-6)

    def test_branch_clamps(self):
        from upapp.spatial import roi_branch
        assert roi_branch(Topology.INTERSECT, 2.0, 0, 20, P) == 1.0
        assert roi_branch(Topology.DISJOINT, 0, 50, 250, P) == 0.0
