"""Geometric primitives: great-circle distance, a local metric frame, and
circle/polygon topology and overlap.

Polygon rings are stored *open*: the closing vertex is implicit and a
repeated first vertex is dropped on construction.  Inside tests use the
even-odd rule over every ring of a polygon, so holes need no orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence, Union

import numpy as np

from .exceptions import DegenerateAngle, InvalidGeometry, NotPolygon, PointTooFar

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0
CIRCLE_SEGMENTS = 64
LOCAL_FRAME_LIMIT_M = 10_000.0


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")


class PlanarPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, slots=True)
class Circle:
    center: PlanarPoint
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"circle radius must be >= 0, got {self.radius}")

    @property
    def area(self) -> float:
        return math.pi * self.radius**2


class Topology(Enum):
    CONTAIN = "contain"
    INTERSECT = "intersect"
    DISJOINT = "disjoint"


@dataclass(frozen=True, slots=True)
class Point:
    point: PlanarPoint


def _open_ring(ring) -> tuple[PlanarPoint, ...]:
    pts = [PlanarPoint(float(x), float(y)) for x, y in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    if len(set(pts)) < 3:
        raise InvalidGeometry(f"ring needs >= 3 distinct vertices, got {len(set(pts))}")
    if not all(math.isfinite(c) for p in pts for c in p):
        raise InvalidGeometry("ring has non-finite vertices")
    return tuple(pts)


@dataclass(frozen=True)
class Polygon:
    """Planar polygon: one exterior ring plus optional holes."""

    exterior: tuple[PlanarPoint, ...]
    holes: tuple[tuple[PlanarPoint, ...], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "exterior", _open_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_open_ring(h) for h in self.holes))
        if ring_self_intersects(np.asarray(self.exterior)):
            raise InvalidGeometry("exterior ring is self-intersecting")

    @property
    def rings(self) -> tuple[tuple[PlanarPoint, ...], ...]:
        return (self.exterior, *self.holes)

    @property
    def area(self) -> float:
        return abs(ring_area(self.exterior)) - sum(abs(ring_area(h)) for h in self.holes)


@dataclass(frozen=True)
class MultiPolygon:
    """Union of non-overlapping polygon parts."""

    parts: tuple[Polygon, ...]

    def __post_init__(self):
        if not self.parts:
            raise InvalidGeometry("multipolygon without parts")

    @property
    def area(self) -> float:
        return sum(p.area for p in self.parts)


PlaceGeometry = Union[Point, Polygon, MultiPolygon]


# ---------------------------------------------------------------------------
# distances and projection


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371 km."""
    return haversine(a.lat, a.lon, b.lat, b.lon)


def haversine(lat1, lon1, lat2, lon2):
    """Array-friendly haversine on raw degrees; returns meters."""
    lat1, lon1, lat2, lon2 = (np.radians(v) for v in (lat1, lon1, lat2, lon2))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if np.ndim(d) == 0:
        return float(d)
    return d


def project_arrays(lats, lons, origin_lat: float, origin_lon: float):
    """Equirectangular projection of degree arrays about an origin, in meters."""
    x = (np.asarray(lons, dtype=float) - origin_lon) * math.cos(math.radians(origin_lat)) * METERS_PER_DEGREE
    y = (np.asarray(lats, dtype=float) - origin_lat) * METERS_PER_DEGREE
    return x, y


def project_local(
    points: Sequence[GeoPoint],
    origin: GeoPoint,
    max_distance_m: float | None = LOCAL_FRAME_LIMIT_M,
) -> list[PlanarPoint]:
    """Map geographic points into a metric frame centered on ``origin``.

    Raises PointTooFar when a point is further than ``max_distance_m`` from
    the origin; pass ``None`` to disable the check.
    """
    if not points:
        return []
    lats = np.array([p.lat for p in points])
    lons = np.array([p.lon for p in points])
    if max_distance_m is not None:
        d = np.atleast_1d(haversine(lats, lons, origin.lat, origin.lon))
        if np.any(d > max_distance_m):
            raise PointTooFar(f"point {float(d.max()):.0f} m from origin exceeds {max_distance_m:.0f} m")
    x, y = project_arrays(lats, lons, origin.lat, origin.lon)
    return [PlanarPoint(float(a), float(b)) for a, b in zip(x, y)]


def unproject_local(points: Sequence[PlanarPoint], origin: GeoPoint) -> list[GeoPoint]:
    scale = math.cos(math.radians(origin.lat)) * METERS_PER_DEGREE
    return [GeoPoint(origin.lat + p.y / METERS_PER_DEGREE, origin.lon + p.x / scale) for p in points]


def turning_angle(prev: GeoPoint, mid: GeoPoint, next: GeoPoint) -> float:
    """Interior angle at ``mid`` in degrees, 180 for a straight line."""
    (ax, ay), (bx, by) = project_local([prev, next], mid, max_distance_m=None)
    if (ax == 0 and ay == 0) or (bx == 0 and by == 0):
        raise DegenerateAngle("zero-length segment at turning point")
    return math.degrees(math.atan2(abs(ax * by - ay * bx), ax * bx + ay * by))


# ---------------------------------------------------------------------------
# planar polygon helpers


def ring_area(ring) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    pts = np.asarray(ring, dtype=float)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def ring_self_intersects(ring: np.ndarray) -> bool:
    """True if any two non-adjacent edges of an open ring cross or touch."""
    n = len(ring)
    if n < 4:
        return False
    a = ring
    b = np.roll(ring, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return False
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]

    def orient(u, v, w):
        return np.sign((v[:, 0] - u[:, 0]) * (w[:, 1] - u[:, 1]) - (v[:, 1] - u[:, 1]) * (w[:, 0] - u[:, 0]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    return bool(np.any(proper))


def point_in_ring(p: PlanarPoint, ring) -> bool:
    x, y = p
    inside = False
    n = len(ring)
    for k in range(n):
        x1, y1 = ring[k]
        x2, y2 = ring[(k + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def point_in_polygon(p: PlanarPoint, poly: Polygon) -> bool:
    inside = False
    for ring in poly.rings:
        if point_in_ring(p, ring):
            inside = not inside
    return inside


def _segment_distance(p, a, b) -> float:
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def boundary_distance(p: PlanarPoint, poly: Polygon) -> float:
    best = math.inf
    for ring in poly.rings:
        n = len(ring)
        for k in range(n):
            d = _segment_distance(p, ring[k], ring[(k + 1) % n])
            if d < best:
                best = d
    return best


def _check(geom) -> None:
    if not isinstance(geom, (Point, Polygon, MultiPolygon)):
        raise InvalidGeometry(f"unsupported geometry {type(geom).__name__}")


def min_distance(geom: PlaceGeometry, p: PlanarPoint) -> float:
    """Distance from ``p`` to the geometry; 0 when ``p`` is inside a polygon."""
    _check(geom)
    if isinstance(geom, Point):
        return math.hypot(geom.point.x - p.x, geom.point.y - p.y)
    if isinstance(geom, MultiPolygon):
        return min(min_distance(part, p) for part in geom.parts)
    if point_in_polygon(p, geom):
        return 0.0
    return boundary_distance(p, geom)


def _polygon_topology(circle: Circle, poly: Polygon) -> Topology:
    c, r = circle.center, circle.radius
    inside = point_in_polygon(c, poly)
    d = boundary_distance(c, poly)
    if inside and d >= r:
        return Topology.CONTAIN
    if all(math.hypot(v.x - c.x, v.y - c.y) <= r for v in poly.exterior):
        return Topology.CONTAIN
    if not inside and d >= r:
        return Topology.DISJOINT
    return Topology.INTERSECT


def classify_topology(stop: Circle, geom: PlaceGeometry) -> Topology:
    """Topological relation between a stop circle and a place geometry.

    Tangency counts as disjoint: a shared boundary point has zero overlap.
    """
    _check(geom)
    if isinstance(geom, Point):
        inside = math.hypot(geom.point.x - stop.center.x, geom.point.y - stop.center.y) <= stop.radius
        return Topology.CONTAIN if inside else Topology.DISJOINT
    if isinstance(geom, Polygon):
        return _polygon_topology(stop, geom)
    parts = [_polygon_topology(stop, p) for p in geom.parts]
    if all(t is Topology.DISJOINT for t in parts):
        return Topology.DISJOINT
    # circle inside one part, or every part inside the circle
    for part, t in zip(geom.parts, parts):
        if t is Topology.CONTAIN and point_in_polygon(stop.center, part):
            return Topology.CONTAIN
    if all(
        all(math.hypot(v.x - stop.center.x, v.y - stop.center.y) <= stop.radius for v in part.exterior)
        for part in geom.parts
    ):
        return Topology.CONTAIN
    return Topology.INTERSECT


# ---------------------------------------------------------------------------
# overlap area


def circle_polygon_vertices(circle: Circle, segments: int = CIRCLE_SEGMENTS) -> list[tuple[float, float]]:
    """Counter-clockwise regular polygon with the same area as ``circle``."""
    scale = math.sqrt(2 * math.pi / (segments * math.sin(2 * math.pi / segments)))
    R = circle.radius * scale
    cx, cy = circle.center
    return [
        (cx + R * math.cos(2 * math.pi * k / segments), cy + R * math.sin(2 * math.pi * k / segments))
        for k in range(segments)
    ]


def clip_ring_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of ``subject`` by the CCW convex ring ``clip``.

    Concave subjects may come back with zero-width bridges; their shoelace
    area is still the overlap area.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not output:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return output


def _ring_overlap(circle: Circle, gon, ring) -> float:
    c, r = circle.center, circle.radius
    # whole ring inside the inscribed circle of the 64-gon: no clipping needed
    apothem = r * math.sqrt(2 * math.pi / (CIRCLE_SEGMENTS * math.sin(2 * math.pi / CIRCLE_SEGMENTS))) * math.cos(
        math.pi / CIRCLE_SEGMENTS
    )
    if all(math.hypot(v[0] - c.x, v[1] - c.y) <= apothem for v in ring):
        return abs(ring_area(ring))
    return abs(ring_area(clip_ring_convex(ring, gon)))


def intersection_area(stop: Circle, polygon: PlaceGeometry) -> float:
    """Overlap area between the stop circle and a polygon, in square meters.

    The circle is discretized as an equal-area regular 64-gon; holes
    subtract and multipolygon parts add.
    """
    _check(polygon)
    if isinstance(polygon, Point):
        raise NotPolygon("intersection area needs a polygon geometry")
    if stop.radius == 0:
        return 0.0
    gon = circle_polygon_vertices(stop)
    parts = polygon.parts if isinstance(polygon, MultiPolygon) else (polygon,)
    total = 0.0
    for part in parts:
        a = _ring_overlap(stop, gon, part.exterior)
        for hole in part.holes:
            a -= _ring_overlap(stop, gon, hole)
        total += max(a, 0.0)
    return total
