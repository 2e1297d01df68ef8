import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from upapp import geo
from upapp.exceptions import DegenerateAngle, InvalidGeometry, NotPolygon, PointTooFar
from upapp.geo import Circle, GeoPoint, PlanarPoint, Point, Polygon, Topology, MultiPolygon

lat_s = st.floats(-80, 80)
lon_s = st.floats(-179, 179)


def square(x0, y0, x1, y1):
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def monte_carlo_area(circle, poly, n=1_000_000, seed=0):
    rng = np.random.default_rng(seed)
    r = circle.radius
    pts = rng.uniform(-r, r, size=(n, 2)) + np.array(circle.center)
    in_circle = np.hypot(pts[:, 0] - circle.center.x, pts[:, 1] - circle.center.y) <= r
    ring = np.array(poly.exterior)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(n, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring, np.roll(ring, -1, axis=0)):
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xi)
    return (in_circle & inside).mean() * (2 * r) ** 2


class TestGeoPoint:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            GeoPoint(91, 0)
        with pytest.raises(ValueError):
            GeoPoint(0, 181)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            GeoPoint(float("nan"), 0)


class TestHaversine:
    def test_identity(self):
        p = GeoPoint(39.99, 116.3)
        assert geo.haversine_distance(p, p) == 0.0

    def test_half_circumference(self):
        d = geo.haversine_distance(GeoPoint(0, 0), GeoPoint(0, 180))
        assert d == pytest.approx(math.pi * 6_371_000, rel=1e-12)
        assert d == pytest.approx(20_015_087, abs=1)

    def test_small_latitude_step(self):
        d = geo.haversine_distance(GeoPoint(39.99, 116.3), GeoPoint(39.9909, 116.3))
        assert d == pytest.approx(100.08, abs=0.05)

    def test_vectorized_matches_scalar(self):
        lats = np.array([10.0, 20.0, -5.0])
        lons = np.array([100.0, 101.0, 3.0])
        d = geo.haversine(lats, lons, 0.0, 0.0)
        for k in range(3):
            assert d[k] == pytest.approx(geo.haversine_distance(GeoPoint(lats[k], lons[k]), GeoPoint(0, 0)))

    @given(lat_s, lon_s, lat_s, lon_s)
    def test_symmetric_nonnegative(self, a, b, c, d):
        p, q = GeoPoint(a, b), GeoPoint(c, d)
        assert geo.haversine_distance(p, q) >= 0
        assert geo.haversine_distance(p, q) == pytest.approx(geo.haversine_distance(q, p), abs=1e-6)

    @given(lat_s, lon_s, lat_s, lon_s, lat_s, lon_s)
    def test_triangle_inequality(self, a, b, c, d, e, f):
        p, q, r = GeoPoint(a, b), GeoPoint(c, d), GeoPoint(e, f)
        assert geo.haversine_distance(p, r) <= geo.haversine_distance(p, q) + geo.haversine_distance(q, r) + 1e-6


class TestProjection:
    def test_origin_maps_to_zero(self):
        o = GeoPoint(39.99, 116.33)
        assert geo.project_local([o], o) == [PlanarPoint(0.0, 0.0)]

    def test_north_step(self):
        o = GeoPoint(39.99, 116.33)
        (p,) = geo.project_local([GeoPoint(39.991, 116.33)], o)
        assert p.x == pytest.approx(0, abs=1e-9)
        assert p.y == pytest.approx(6_371_000 * math.pi / 180 * 0.001, abs=1e-6)
        assert p.y == pytest.approx(111.19, abs=0.01)

    def test_too_far(self):
        with pytest.raises(PointTooFar):
            geo.project_local([GeoPoint(40.2, 116.33)], GeoPoint(39.99, 116.33))

    @given(st.floats(-1000, 1000), st.floats(-1000, 1000))
    def test_round_trip(self, x, y):
        o = GeoPoint(39.99, 116.33)
        (g,) = geo.unproject_local([PlanarPoint(x, y)], o)
        (p,) = geo.project_local([g], o)
        assert p.x == pytest.approx(x, abs=1e-6) and p.y == pytest.approx(y, abs=1e-6)

    @given(st.floats(-1400, 1400), st.floats(-1400, 1400), st.floats(-1400, 1400), st.floats(-1400, 1400))
    def test_planar_distance_matches_haversine(self, x1, y1, x2, y2):
        o = GeoPoint(39.99, 116.33)
        a, b = geo.unproject_local([PlanarPoint(x1, y1), PlanarPoint(x2, y2)], o)
        planar = math.hypot(x1 - x2, y1 - y2)
        if planar > 1.0:
            assert planar == pytest.approx(geo.haversine_distance(a, b), rel=1e-3)


class TestTurningAngle:
    o = GeoPoint(39.99, 116.33)

    def pts(self, *xy):
        return geo.unproject_local([PlanarPoint(x, y) for x, y in xy], self.o)

    def test_straight(self):
        a, b, c = self.pts((-50, 0), (0, 0), (50, 0))
        assert geo.turning_angle(a, b, c) == pytest.approx(180, abs=1e-9)

    def test_reversal(self):
        a, b = self.pts((-50, 10), (0, 0))
        assert geo.turning_angle(a, b, a) == pytest.approx(0, abs=1e-9)

    def test_right_angle(self):
        a, b, c = self.pts((-50, 0), (0, 0), (0, 50))
        assert geo.turning_angle(a, b, c) == pytest.approx(90, abs=0.01)

    def test_degenerate(self):
        a, b = self.pts((0, 0), (10, 0))
        with pytest.raises(DegenerateAngle):
            geo.turning_angle(a, a, b)


class TestPolygon:
    def test_closed_and_open_rings_agree(self):
        open_ = square(0, 0, 2, 2)
        closed = Polygon([(0, 0), (2, 0), (2, 2), (0, 2), (0, 0)])
        assert open_.exterior == closed.exterior
        assert open_.area == pytest.approx(4)

    def test_too_few_vertices(self):
        with pytest.raises(InvalidGeometry):
            Polygon([(0, 0), (1, 0), (0, 0)])

    def test_self_intersecting(self):
        with pytest.raises(InvalidGeometry):
            Polygon([(0, 0), (2, 2), (2, 0), (0, 2)])

    def test_hole_area(self):
        p = Polygon([(0, 0), (4, 0), (4, 4), (0, 4)], holes=([(1, 1), (2, 1), (2, 2), (1, 2)],))
        assert p.area == pytest.approx(15)


class TestTopology:
    unit = Circle(PlanarPoint(0, 0), 1.0)

    def test_point_at_center(self):
        assert geo.classify_topology(self.unit, Point(PlanarPoint(0, 0))) is Topology.CONTAIN

    def test_point_outside(self):
        assert geo.classify_topology(self.unit, Point(PlanarPoint(3, 0))) is Topology.DISJOINT

    def test_disjoint_square(self):
        sq = Polygon([(2, -1), (4, -1), (4, 1), (2, 1)])
        assert geo.classify_topology(self.unit, sq) is Topology.DISJOINT

    def test_center_on_edge_intersects(self):
        sq = Polygon([(0, -2), (2, -2), (2, 2), (0, 2)])
        assert geo.classify_topology(self.unit, sq) is Topology.INTERSECT

    def test_circle_inside_polygon(self):
        assert geo.classify_topology(self.unit, square(-5, -5, 5, 5)) is Topology.CONTAIN

    def test_polygon_inside_circle(self):
        assert geo.classify_topology(self.unit, square(-0.3, -0.3, 0.3, 0.3)) is Topology.CONTAIN

    def test_circle_in_hole_is_disjoint(self):
        p = Polygon([(-10, -10), (10, -10), (10, 10), (-10, 10)], holes=([(-3, -3), (3, -3), (3, 3), (-3, 3)],))
        assert geo.classify_topology(self.unit, p) is Topology.DISJOINT

    def test_multipolygon(self):
        mp = MultiPolygon((square(5, 5, 6, 6), square(-0.5, -3, 0.5, 3)))
        assert geo.classify_topology(self.unit, mp) is Topology.INTERSECT
        far = MultiPolygon((square(5, 5, 6, 6), square(-6, -6, -5, -5)))
        assert geo.classify_topology(self.unit, far) is Topology.DISJOINT


class TestIntersectionArea:
    def test_polygon_inside_circle(self):
        sq = square(-1, -1, 1, 1)
        assert geo.intersection_area(Circle(PlanarPoint(0, 0), 10), sq) == pytest.approx(4.0, rel=1e-12)

    def test_circle_inside_polygon(self):
        c = Circle(PlanarPoint(0, 0), 10)
        assert geo.intersection_area(c, square(-50, -50, 50, 50)) == pytest.approx(math.pi * 100, rel=0.003)

    def test_half_plane_square(self):
        c = Circle(PlanarPoint(0, 0), 10)
        sq = square(0, -20, 40, 20)
        a = geo.intersection_area(c, sq)
        assert a == pytest.approx(math.pi * 50, rel=0.003)
        assert a == pytest.approx(monte_carlo_area(c, sq, 200_000), rel=0.01)

    def test_point_raises(self):
        with pytest.raises(NotPolygon):
            geo.intersection_area(Circle(PlanarPoint(0, 0), 1), Point(PlanarPoint(0, 0)))

    def test_hole_subtracts(self):
        c = Circle(PlanarPoint(0, 0), 10)
        p = Polygon([(-50, -50), (50, -50), (50, 50), (-50, 50)], holes=([(-1, -1), (1, -1), (1, 1), (-1, 1)],))
        assert geo.intersection_area(c, p) == pytest.approx(math.pi * 100 - 4, rel=0.003)

    def test_concave_polygon(self):
        c = Circle(PlanarPoint(0, 0), 5)
        u = Polygon([(-10, -10), (10, -10), (10, 10), (2, 10), (2, -2), (-2, -2), (-2, 10), (-10, 10)])
        assert geo.intersection_area(c, u) == pytest.approx(monte_carlo_area(c, u, 400_000), rel=0.01)

    @given(
        st.floats(-20, 20), st.floats(-20, 20), st.floats(1, 30), st.floats(1, 30), st.floats(1, 20), st.floats(0, 10)
    )
    def test_bounds_and_monotone(self, x, y, w, h, r, dr):
        sq = square(x, y, x + w, y + h)
        a = geo.intersection_area(Circle(PlanarPoint(0, 0), r), sq)
        b = geo.intersection_area(Circle(PlanarPoint(0, 0), r + dr), sq)
        assert 0 <= a <= min(math.pi * r * r, sq.area) * 1.003
        assert b >= a - 1e-9

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 5))
    def test_contain_implies_full_area(self, x, y, r):
        sq = square(-10, -10, 10, 10)
        c = Circle(PlanarPoint(x, y), r)
        if geo.classify_topology(c, sq) is Topology.CONTAIN:
            assert geo.intersection_area(c, sq) == pytest.approx(min(c.area, sq.area), rel=0.003)


class TestMinDistance:
    def test_inside(self):
        assert geo.min_distance(square(-1, -1, 1, 1), PlanarPoint(0, 0)) == 0

    def test_point(self):
        assert geo.min_distance(Point(PlanarPoint(3, 4)), PlanarPoint(0, 0)) == pytest.approx(5)

    def test_nearest_vertex(self):
        assert geo.min_distance(square(1, 1, 2, 2), PlanarPoint(0, 0)) == pytest.approx(math.sqrt(2))

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_zero_iff_inside(self, x, y):
        sq = square(-1, -2, 2, 1)
        p = PlanarPoint(x, y)
        inside = -1 <= x <= 2 and -2 <= y <= 1
        d = geo.min_distance(sq, p)
        assert (d == 0) == inside

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_matches_edge_sampling(self, x, y):
        sq = square(1, 1, 2, 2)
        p = PlanarPoint(x, y)
        t = np.linspace(0, 1, 2001)
        edges = [((1, 1), (2, 1)), ((2, 1), (2, 2)), ((2, 2), (1, 2)), ((1, 2), (1, 1))]
        samples = np.concatenate([np.outer(1 - t, a) + np.outer(t, b) for a, b in edges])
        brute = np.hypot(samples[:, 0] - x, samples[:, 1] - y).min()
        if not (1 < x < 2 and 1 < y < 2):
            assert geo.min_distance(sq, p) == pytest.approx(brute, abs=1e-3)
