"""Trajectory parsing, noise filtering, place categorization and the place index."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone, tzinfo
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import geo
from .exceptions import (
    EmptyIndex,
    EmptyInput,
    GeometryParseError,
    InvalidGeometry,
    SchemaMismatch,
)
from .geo import GeoPoint, METERS_PER_DEGREE

log = logging.getLogger(__name__)


class PlaceCategory(Enum):
    RESIDENTIAL = "residential"
    WORKING = "working"
    SERVICE = "service"
    DINING = "dining"
    SCHOOL = "school"
    LEISURE = "leisure"
    SHOPPING = "shopping"

    @property
    def index(self) -> int:
        return CATEGORIES.index(self)

    @classmethod
    def parse(cls, text: str) -> "PlaceCategory | None":
        """Case-insensitive name, optionally followed by "place(s)"; None if unknown."""
        words = re.sub(r"[_\-]+", " ", text).lower().split()
        if len(words) == 2 and words[1] in ("place", "places"):
            words = words[:1]
        key = " ".join(words)
        for c in cls:
            if c.value == key:
                return c
        return None


CATEGORIES: tuple[PlaceCategory, ...] = tuple(PlaceCategory)
N_CATEGORIES = len(CATEGORIES)


# ---------------------------------------------------------------------------
# trajectories


class TrajectoryPoint(NamedTuple):
    user_id: str
    timestamp: int  # epoch seconds
    position: GeoPoint


@dataclass(eq=False)
class Trajectory:
    """One user's points for one local calendar day, sorted by time.

    Columns are stored as parallel numpy arrays: ``times`` in epoch seconds,
    ``lats`` and ``lons`` in degrees.
    """

    user_id: str
    day: date
    times: np.ndarray
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.lats = np.asarray(self.lats, dtype=float)
        self.lons = np.asarray(self.lons, dtype=float)
        if not (len(self.times) == len(self.lats) == len(self.lons)):
            raise ValueError("trajectory columns differ in length")

    def __len__(self) -> int:
        return len(self.times)

    def point(self, i: int) -> TrajectoryPoint:
        return TrajectoryPoint(self.user_id, int(self.times[i]), GeoPoint(float(self.lats[i]), float(self.lons[i])))

    def __iter__(self) -> Iterator[TrajectoryPoint]:
        return (self.point(i) for i in range(len(self)))

    def take(self, idx) -> "Trajectory":
        return Trajectory(self.user_id, self.day, self.times[idx], self.lats[idx], self.lons[idx])


@dataclass(frozen=True)
class TrajectorySchema:
    user: str = "user"
    time: str = "time"
    lat: str = "lat"
    lon: str = "lon"
    time_format: str = "iso"  # "iso" or "epoch"
    delimiter: str = ","


@dataclass
class ParseStats:
    rows: int = 0
    skipped: int = 0
    duplicates: int = 0


def parse_timestamp(text: str, time_format: str, tz: tzinfo) -> int:
    text = text.strip()
    if time_format == "epoch":
        return int(math.floor(float(text)))
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=tz)
    return int(math.floor(dt.timestamp()))


def local_date(ts: int, tz: tzinfo) -> date:
    return datetime.fromtimestamp(ts, tz).date()


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8")), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def parse_trajectories(
    source, schema: TrajectorySchema = TrajectorySchema(), tz: tzinfo = timezone.utc
) -> tuple[list[Trajectory], ParseStats]:
    """Read delimited trajectory rows into per-user, per-day trajectories.

    Duplicate (user, timestamp) rows keep their first occurrence.  Rows with
    missing, unparsable or out-of-range values are skipped and counted.
    """
    stream, owned = _open_text(source)
    stats = ParseStats()
    seen: dict[str, dict[int, tuple[float, float]]] = defaultdict(dict)
    try:
        reader = csv.DictReader(stream, delimiter=schema.delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (schema.user, schema.time, schema.lat, schema.lon) if c not in header]
        if missing:
            if not header:
                raise EmptyInput("trajectory input has no header row")
            raise SchemaMismatch(f"missing column(s) {missing}; header is {header}")
        for row in reader:
            stats.rows += 1
            try:
                user = (row[schema.user] or "").strip()
                ts = parse_timestamp(row[schema.time], schema.time_format, tz)
                lat = float(row[schema.lat])
                lon = float(row[schema.lon])
                if not user:
                    raise ValueError("empty user id")
                GeoPoint(lat, lon)
            except (ValueError, TypeError, AttributeError, OverflowError):
                stats.skipped += 1
                continue
            if ts in seen[user]:
                stats.duplicates += 1
                continue
            seen[user][ts] = (lat, lon)
    finally:
        if owned:
            stream.close()

    if not seen:
        raise EmptyInput("no valid trajectory rows")

    out: list[Trajectory] = []
    for user in sorted(seen):
        by_day: dict[date, list[tuple[int, float, float]]] = defaultdict(list)
        for ts, (lat, lon) in seen[user].items():
            by_day[local_date(ts, tz)].append((ts, lat, lon))
        for day in sorted(by_day):
            rows = sorted(by_day[day])
            arr = np.array(rows, dtype=float)
            out.append(Trajectory(user, day, arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2]))
    return out, stats


def _turning_angles(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Interior angle at every inner point, NaN where a segment has zero length."""
    mlat, mlon = lats[1:-1], lons[1:-1]
    scale = np.cos(np.radians(mlat))
    ax, ay = (lons[:-2] - mlon) * scale, lats[:-2] - mlat
    bx, by = (lons[2:] - mlon) * scale, lats[2:] - mlat
    ang = np.degrees(np.arctan2(np.abs(ax * by - ay * bx), ax * bx + ay * by))
    degenerate = ((ax == 0) & (ay == 0)) | ((bx == 0) & (by == 0))
    ang[degenerate] = np.nan
    return ang


def filter_noise(traj: Trajectory, max_speed_kmh: float = 180.0, min_angle_deg: float = 30.0) -> Trajectory:
    """Drop drift points by speed and turning angle until nothing changes.

    Speed is measured from the last kept point, so the return leg of an
    isolated spike does not condemn the good point after it.  The angle
    rule removes, per pass, flagged points that are the sharpest among
    their flagged neighbors; the ends of the trajectory are exempt and
    undefined angles (repeated positions) pass.
    """
    max_speed = max_speed_kmh / 3.6
    keep = np.arange(len(traj))
    while len(keep) > 1:
        changed = False
        lats, lons, times = traj.lats[keep], traj.lons[keep], traj.times[keep]
        speed = geo.haversine(lats[:-1], lons[:-1], lats[1:], lons[1:]) / np.diff(times)
        if np.any(speed > max_speed):
            kept = [0]
            for i in range(1, len(keep)):
                j = kept[-1]
                d = geo.haversine(float(lats[j]), float(lons[j]), float(lats[i]), float(lons[i]))
                if d / (times[i] - times[j]) > max_speed:
                    continue
                kept.append(i)
            keep = keep[kept]
            changed = True
            lats, lons = traj.lats[keep], traj.lons[keep]

        if len(keep) > 2:
            ang = np.concatenate([[np.nan], _turning_angles(lats, lons), [np.nan]])
            flagged = ang < min_angle_deg  # NaN compares False
            if flagged.any():
                inf = np.where(flagged, ang, np.inf)
                left = np.concatenate([[np.inf], inf[:-1]])
                right = np.concatenate([inf[1:], [np.inf]])
                drop = flagged & (left > inf) & (right >= inf)
                keep = keep[~drop]
                changed = True
        if not changed:
            break
    return traj.take(keep)


# ---------------------------------------------------------------------------
# category rules


@dataclass(frozen=True)
class CategoryRule:
    source: str  # "poi" or "osm"
    expression: str  # poi: keyword; osm: key=value or key=*
    category: PlaceCategory

    def matches(self, tags: dict[str, str], poi_keys: Sequence[str]) -> bool:
        if self.source == "poi":
            needle = self.expression.lower()
            return any(needle in str(tags[k]).lower() for k in poi_keys if tags.get(k) is not None)
        key, _, value = self.expression.partition("=")
        key, value = key.strip(), value.strip()
        if key not in tags or tags[key] is None:
            return False
        return value == "*" or str(tags[key]) == value


POI_CLASS_KEYS = ("category", "type", "class", "classification", "poi_type")

_POI_KEYWORDS = [
    (PlaceCategory.RESIDENTIAL, ["community", "residential"]),
    (PlaceCategory.WORKING, ["company", "office building", "government"]),
    (PlaceCategory.SERVICE, ["life services", "medical care", "finance", "car"]),
    (PlaceCategory.DINING, ["dining"]),
    (PlaceCategory.SCHOOL, ["school"]),
    (PlaceCategory.LEISURE, ["leisure"]),
    (PlaceCategory.SHOPPING, ["shopping"]),
]

_OSM_RULES = [
    ("landuse=residential", PlaceCategory.RESIDENTIAL),
    ("office=*", PlaceCategory.WORKING),
    ("amenity=restaurant", PlaceCategory.DINING),
    ("amenity=college", PlaceCategory.SCHOOL),
    ("amenity=university", PlaceCategory.SCHOOL),
    ("amenity=school", PlaceCategory.SCHOOL),
    ("amenity=kindergarten", PlaceCategory.SCHOOL),
    ("leisure=*", PlaceCategory.LEISURE),
    ("shop=*", PlaceCategory.SHOPPING),
    ("amenity=*", PlaceCategory.SERVICE),
]

DEFAULT_RULES: tuple[CategoryRule, ...] = tuple(
    [CategoryRule("poi", kw, cat) for cat, kws in _POI_KEYWORDS for kw in kws]
    + [CategoryRule("osm", expr, cat) for expr, cat in _OSM_RULES]
)


def load_category_rules(path) -> tuple[CategoryRule, ...]:
    """Read ``source, expression, category`` lines; ``#`` starts a comment."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'source, expression, category'")
            source, expr, cat_text = parts
            source = source.lower()
            cat = PlaceCategory.parse(cat_text)
            if source not in ("poi", "osm") or cat is None or not expr:
                raise ValueError(f"{path}:{lineno}: bad rule {line!r}")
            if source == "osm" and "=" not in expr:
                raise ValueError(f"{path}:{lineno}: osm rule needs key=value")
            rules.append(CategoryRule(source, expr, cat))
    return tuple(rules)


def map_category(
    tags: dict[str, str],
    source: str,
    rules: Sequence[CategoryRule] = DEFAULT_RULES,
    poi_keys: Sequence[str] = POI_CLASS_KEYS,
) -> PlaceCategory | None:
    """First matching rule for ``source`` wins; ``None`` means rejected."""
    source = source.lower()
    for rule in rules:
        if rule.source == source and rule.matches(tags, poi_keys):
            return rule.category
    return None


# ---------------------------------------------------------------------------
# places


@dataclass(eq=False)
class Place:
    """A categorized POI (``point`` set) or ROI (``parts`` set).

    ROI parts are lists of rings, each an ``(n, 2)`` array of lon/lat
    degrees, exterior first.
    """

    place_id: str
    category: PlaceCategory
    point: GeoPoint | None = None
    parts: tuple[tuple[np.ndarray, ...], ...] = ()
    name: str | None = None
    anchor: GeoPoint = field(init=False)
    bbox: tuple[float, float, float, float] = field(init=False)
    degenerate: bool = field(init=False, default=False)  # zero-area ROI

    def __post_init__(self):
        if (self.point is None) == (not self.parts):
            raise InvalidGeometry("place needs exactly one of point / polygon parts")
        if self.point is not None:
            self.anchor = self.point
            self.bbox = (self.point.lat, self.point.lon, self.point.lat, self.point.lon)
        else:
            ext = np.vstack([part[0] for part in self.parts])
            lo, hi = ext.min(axis=0), ext.max(axis=0)
            self.bbox = (float(lo[1]), float(lo[0]), float(hi[1]), float(hi[0]))
            self.anchor = GeoPoint((lo[1] + hi[1]) / 2, (lo[0] + hi[0]) / 2)
            self.degenerate = self.planar_geometry(self.anchor).area <= 0  # also validates rings

    @property
    def kind(self) -> str:
        return "poi" if self.point is not None else "roi"

    @property
    def is_roi(self) -> bool:
        return self.point is None

    def planar_geometry(self, origin: GeoPoint) -> geo.PlaceGeometry:
        if self.point is not None:
            x, y = geo.project_arrays(self.point.lat, self.point.lon, origin.lat, origin.lon)
            return geo.Point(geo.PlanarPoint(float(x), float(y)))
        polys = []
        for part in self.parts:
            rings = []
            for ring in part:
                x, y = geo.project_arrays(ring[:, 1], ring[:, 0], origin.lat, origin.lon)
                rings.append(list(zip(x.tolist(), y.tolist())))
            polys.append(geo.Polygon(rings[0], tuple(rings[1:])))
        return polys[0] if len(polys) == 1 else geo.MultiPolygon(tuple(polys))

    def distance_to(self, p: GeoPoint) -> float:
        """Haversine distance for POIs, local-frame min distance for ROIs."""
        if self.point is not None:
            return geo.haversine_distance(self.point, p)
        return geo.min_distance(self.planar_geometry(p), geo.PlanarPoint(0.0, 0.0))


class PlaceIndex:
    """Immutable place collection with a uniform lat/lon grid for radius queries."""

    def __init__(self, places: Iterable[Place], cell_m: float = 200.0, stats: dict | None = None):
        self.places: tuple[Place, ...] = tuple(places)
        if not self.places:
            raise EmptyIndex("no places survived categorization")
        ids = [p.place_id for p in self.places]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate place ids")
        self.stats = dict(stats or {})
        self.global_counts = np.zeros(N_CATEGORIES, dtype=np.int64)
        for p in self.places:
            self.global_counts[p.category.index] += 1
        self._by_id = {p.place_id: p for p in self.places}

        ref_lat = float(np.mean([p.anchor.lat for p in self.places]))
        self._cell_lat = cell_m / METERS_PER_DEGREE
        self._cell_lon = self._cell_lat / max(math.cos(math.radians(ref_lat)), 1e-6)
        self._grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        for k, p in enumerate(self.places):
            lat0, lon0, lat1, lon1 = p.bbox
            for cell in self._cells(lat0, lon0, lat1, lon1):
                self._grid[cell].append(k)

    def _cells(self, lat0, lon0, lat1, lon1):
        i0, i1 = math.floor(lat0 / self._cell_lat), math.floor(lat1 / self._cell_lat)
        j0, j1 = math.floor(lon0 / self._cell_lon), math.floor(lon1 / self._cell_lon)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                yield (i, j)

    def __len__(self) -> int:
        return len(self.places)

    def __getitem__(self, place_id: str) -> Place:
        return self._by_id[place_id]

    @property
    def total(self) -> int:
        return int(self.global_counts.sum())

    def count(self, category: PlaceCategory) -> int:
        return int(self.global_counts[category.index])

    def query(self, center: GeoPoint, radius: float) -> list[tuple[Place, float]]:
        """Places within ``radius`` meters of ``center``, nearest first."""
        margin = radius * 1.01 + 1.0
        dlat = margin / METERS_PER_DEGREE
        top = min(abs(center.lat) + dlat, 89.9)
        dlon = dlat / math.cos(math.radians(top))
        hits = set()
        for cell in self._cells(center.lat - dlat, center.lon - dlon, center.lat + dlat, center.lon + dlon):
            hits.update(self._grid.get(cell, ()))
        out = []
        for k in hits:
            p = self.places[k]
            d = p.distance_to(center)
            if d <= radius:
                out.append((p, d))
        out.sort(key=lambda pd: (pd[1], pd[0].place_id))
        return out

    def query_brute_force(self, center: GeoPoint, radius: float) -> list[tuple[Place, float]]:
        out = [(p, p.distance_to(center)) for p in self.places]
        out = [pd for pd in out if pd[1] <= radius]
        out.sort(key=lambda pd: (pd[1], pd[0].place_id))
        return out


def read_features(source) -> list[dict]:
    """Features of a GeoJSON FeatureCollection (path, text stream or dict)."""
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = json.load(source)
    if doc.get("type") == "Feature":
        return [doc]
    if doc.get("type") != "FeatureCollection":
        raise GeometryParseError("expected a GeoJSON FeatureCollection")
    return list(doc.get("features") or [])


def _rings_from_coords(rings) -> tuple[np.ndarray, ...]:
    out = []
    for ring in rings:
        arr = np.asarray(ring, dtype=float)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise GeometryParseError("ring coordinates must be [lon, lat] pairs")
        out.append(arr[:, :2])
    if not out:
        raise GeometryParseError("polygon without rings")
    return tuple(out)


def place_from_feature(feature: dict, source: str, default_id: str, rules=DEFAULT_RULES) -> Place | None:
    """Build a Place, or ``None`` when the tags map to no category.

    Raises GeometryParseError for unusable geometry.
    """
    props = dict(feature.get("properties") or {})
    category = None
    if props.get("category") is not None and source == "place":
        category = PlaceCategory.parse(str(props["category"]))
    else:
        category = map_category(props, source, rules)
    if category is None:
        return None
    geom = feature.get("geometry") or {}
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    place_id = str(props.get("place_id") or feature.get("id") or props.get("id") or props.get("osm_id") or default_id)
    name = props.get("name")
    try:
        if gtype == "Point":
            lon, lat = float(coords[0]), float(coords[1])
            return Place(place_id, category, point=GeoPoint(lat, lon), name=name)
        if gtype == "Polygon":
            return Place(place_id, category, parts=(_rings_from_coords(coords),), name=name)
        if gtype == "MultiPolygon":
            return Place(place_id, category, parts=tuple(_rings_from_coords(p) for p in coords), name=name)
    except (InvalidGeometry, ValueError, TypeError, IndexError) as exc:
        raise GeometryParseError(f"feature {place_id}: {exc}") from exc
    raise GeometryParseError(f"feature {place_id}: unsupported geometry type {gtype!r}")


def build_place_index(
    poi_source: Iterable[dict] = (),
    roi_source: Iterable[dict] = (),
    rules: Sequence[CategoryRule] = DEFAULT_RULES,
    cell_m: float = 200.0,
) -> PlaceIndex:
    """Categorize POI (keyword rules) and ROI (OSM tag rules) features into an index.

    Unmatched features and features with broken geometry are skipped; the
    skip counts land in ``index.stats``.
    """
    places: list[Place] = []
    stats = {"features": 0, "unmatched": 0, "geometry_errors": 0}
    for source, features, prefix in (("poi", poi_source, "poi"), ("osm", roi_source, "roi")):
        for k, feature in enumerate(features):
            stats["features"] += 1
            try:
                place = place_from_feature(feature, source, f"{prefix}-{k}", rules)
            except GeometryParseError as exc:
                log.warning("skipping feature: %s", exc)
                stats["geometry_errors"] += 1
                continue
            if place is None:
                stats["unmatched"] += 1
                continue
            places.append(place)
    return PlaceIndex(places, cell_m=cell_m, stats=stats)


def places_to_geojson(index: PlaceIndex) -> dict:
    """Serialize categorized places; read back with :func:`index_from_geojson`."""
    features = []
    for p in index.places:
        if p.point is not None:
            geometry = {"type": "Point", "coordinates": [p.point.lon, p.point.lat]}
        else:
            polys = [[ring.tolist() for ring in part] for part in p.parts]
            geometry = (
                {"type": "Polygon", "coordinates": polys[0]}
                if len(polys) == 1
                else {"type": "MultiPolygon", "coordinates": polys}
            )
        props = {"place_id": p.place_id, "category": p.category.value}
        if p.name is not None:
            props["name"] = p.name
        features.append({"type": "Feature", "geometry": geometry, "properties": props})
    return {"type": "FeatureCollection", "features": features}


def index_from_geojson(source, cell_m: float = 200.0) -> PlaceIndex:
    features = read_features(source)
    places = []
    for k, f in enumerate(features):
        place = place_from_feature(f, "place", f"place-{k}")
        if place is None:
            raise GeometryParseError(f"feature {k} lacks a valid category")
        places.append(place)
    return PlaceIndex(places, cell_m=cell_m)
