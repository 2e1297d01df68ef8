"""Seeded synthetic place maps, visits, trajectories and activity logs.

Places sit in small clusters on a regular grid.  Each cluster is dominated
by one category; some clusters also hold one place of another category at
their center, which is where nearest-place annotation goes wrong.  Visits
draw their start hour and duration from planted per-category distributions
whose bin marginals are balanced, so averaged potential visits recover them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .artifacts import atomic_write_text
from .evaluation import ActivityLogEntry, format_logs
from .geo import METERS_PER_DEGREE, GeoPoint
from .ingest import CATEGORIES, N_CATEGORIES, Place, PlaceCategory, PlaceIndex
from .priors import BinScheme
from .stops import Stop, StopSource

R, W, SV, D, SC, L, SH = CATEGORIES

# POI class keywords and OSM tags that the default category rules accept
POI_TYPES = {
    R: "residential community",
    W: "company",
    SV: "life services",
    D: "dining",
    SC: "school",
    L: "leisure",
    SH: "shopping",
}
ROI_TAGS = {
    R: {"landuse": "residential"},
    W: {"office": "company"},
    SC: {"amenity": "school"},
    L: {"leisure": "park"},
}

# (hour, spread in hours, weight) bumps per category, over a low floor
_TIME_BUMPS = {
    R: [(3, 3.0, 1.0), (20, 2.5, 0.8)],
    W: [(9, 2.0, 1.0), (14, 2.5, 0.7)],
    SV: [(10, 2.5, 1.0), (16, 2.5, 0.6)],
    D: [(12, 1.8, 1.0), (18, 2.0, 0.9)],
    SC: [(8, 2.0, 1.0), (13, 2.5, 0.5)],
    L: [(16, 2.5, 1.0), (21, 2.0, 0.6)],
    SH: [(11, 2.5, 0.8), (19, 2.5, 1.0)],
}
_DURATION_WEIGHTS = {
    R: [0.05, 0.10, 0.15, 0.25, 0.45],
    W: [0.05, 0.10, 0.20, 0.30, 0.35],
    SV: [0.35, 0.35, 0.15, 0.10, 0.05],
    D: [0.30, 0.45, 0.15, 0.06, 0.04],
    SC: [0.05, 0.10, 0.25, 0.30, 0.30],
    L: [0.15, 0.30, 0.30, 0.15, 0.10],
    SH: [0.30, 0.35, 0.20, 0.10, 0.05],
}


def sinkhorn_balance(matrix: np.ndarray, iters: int = 2000, tol: float = 1e-12) -> np.ndarray:
    """Rescale a positive matrix so rows sum to 1 and columns share equal mass."""
    m = np.asarray(matrix, dtype=float).copy()
    target = m.shape[0] / m.shape[1]
    for _ in range(iters):
        m *= target / m.sum(axis=0, keepdims=True)
        m /= m.sum(axis=1, keepdims=True)
        if np.abs(m.sum(axis=0) - target).max() < tol:
            break
    return m


def planted_time_profiles(scheme: BinScheme = BinScheme()) -> np.ndarray:
    """``P(time_bin | category)`` with uniform bin marginal under equal category shares."""
    hours = np.arange(24) + 0.5
    raw = np.zeros((N_CATEGORIES, scheme.n_time_bins))
    for c, bumps in _TIME_BUMPS.items():
        per_hour = np.full(24, 0.15)
        for mu, sd, w in bumps:
            d = np.minimum(np.abs(hours - mu), 24 - np.abs(hours - mu))
            per_hour += w * np.exp(-0.5 * (d / sd) ** 2)
        row = np.zeros(scheme.n_time_bins)
        row[0] = per_hour[: scheme.early_hours].sum()
        row[1:] = per_hour[scheme.early_hours :]
        raw[c.index] = row
    return sinkhorn_balance(raw)


def planted_duration_profiles(scheme: BinScheme = BinScheme()) -> np.ndarray:
    raw = np.array([_DURATION_WEIGHTS[c] for c in CATEGORIES], dtype=float)
    if raw.shape[1] != scheme.n_duration_bins:
        raise ValueError("planted duration profiles assume the default five duration bins")
    return sinkhorn_balance(raw)


@dataclass(frozen=True)
class SyntheticConfig:
    n_stops: int = 12_000
    clusters_per_category: int = 100
    mixed_fraction: float = 0.75
    cluster_spacing_m: float = 600.0
    ring_radius_m: float = 25.0
    dominant_places: int = 6
    minority_visit_share: float = 0.05
    position_noise_m: float = 20.0  # per-axis standard deviation
    roi_side_m: float = 50.0
    n_users: int = 200
    origin: GeoPoint = GeoPoint(39.99, 116.33)
    start_day: date = date(2024, 3, 4)
    seed: int = 0


@dataclass
class PlaceMap:
    places: list[Place]
    features_poi: list[dict]
    features_roi: list[dict]
    cluster_of: dict[str, int]
    clusters: list[dict] = field(default_factory=list)

    def index(self) -> PlaceIndex:
        return PlaceIndex(self.places)


@dataclass
class SyntheticCorpus:
    config: SyntheticConfig
    place_map: PlaceMap
    stops: list[Stop]
    truth: dict[str, Place]  # stop_id -> visited place
    logs: list[ActivityLogEntry]
    time_profiles: np.ndarray
    duration_profiles: np.ndarray


def _offset(origin: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    lat = origin.lat + north_m / METERS_PER_DEGREE
    lon = origin.lon + east_m / (METERS_PER_DEGREE * math.cos(math.radians(origin.lat)))
    return GeoPoint(lat, lon)


def _poi(place_id: str, cat: PlaceCategory, p: GeoPoint) -> tuple[Place, dict]:
    feature = {
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [p.lon, p.lat]},
        "properties": {"id": place_id, "name": f"{cat.value} {place_id}", "type": POI_TYPES[cat]},
    }
    return Place(place_id, cat, point=p, name=f"{cat.value} {place_id}"), feature


def _roi(place_id: str, cat: PlaceCategory, center: GeoPoint, side: float) -> tuple[Place, dict]:
    h = side / 2
    corners = [_offset(center, dx, dy) for dx, dy in ((-h, -h), (h, -h), (h, h), (-h, h))]
    ring = [[c.lon, c.lat] for c in corners]
    feature = {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [ring + [ring[0]]]},
        "properties": {"id": place_id, **ROI_TAGS[cat]},
    }
    return Place(place_id, cat, parts=((np.array(ring),),)), feature


def build_place_map(cfg: SyntheticConfig, rng: np.random.Generator) -> PlaceMap:
    n = cfg.clusters_per_category * N_CATEGORIES
    side = math.ceil(math.sqrt(n))
    types = np.tile(np.arange(N_CATEGORIES), cfg.clusters_per_category)
    rng.shuffle(types)
    mixed = rng.random(n) < cfg.mixed_fraction
    places, fp, fr, cluster_of, clusters = [], [], [], {}, []
    for k in range(n):
        row, col = divmod(k, side)
        center = _offset(cfg.origin, (col - side / 2) * cfg.cluster_spacing_m, (row - side / 2) * cfg.cluster_spacing_m)
        dom = CATEGORIES[types[k]]
        members = []
        if mixed[k]:
            minority = CATEGORIES[(types[k] + 1 + rng.integers(N_CATEGORIES - 1)) % N_CATEGORIES]
            members.append(_poi(f"c{k:04d}-0", minority, center))
        elif dom in ROI_TAGS:
            members.append(_roi(f"c{k:04d}-0", dom, center, cfg.roi_side_m))
        else:
            members.append(_poi(f"c{k:04d}-0", dom, center))
        phase = rng.uniform(0, 2 * math.pi)
        for j in range(cfg.dominant_places):
            a = phase + 2 * math.pi * j / cfg.dominant_places
            p = _offset(center, cfg.ring_radius_m * math.cos(a), cfg.ring_radius_m * math.sin(a))
            members.append(_poi(f"c{k:04d}-{j + 1}", dom, p))
        for place, feature in members:
            places.append(place)
            (fr if place.is_roi else fp).append(feature)
            cluster_of[place.place_id] = k
        clusters.append(
            {"center": center, "dominant": dom, "mixed": bool(mixed[k]), "places": [m[0] for m in members]}
        )
    return PlaceMap(places, fp, fr, cluster_of, clusters)


def _sample_start(day: date, bin_k: int, scheme: BinScheme, rng) -> int:
    if bin_k == 0:
        seconds = rng.integers(0, scheme.early_hours * 3600)
    else:
        seconds = (scheme.early_hours + bin_k - 1) * 3600 + rng.integers(0, 3600)
    start = datetime(day.year, day.month, day.day, tzinfo=timezone.utc) + timedelta(seconds=int(seconds))
    return int(start.timestamp())


def _sample_duration(bin_m: int, scheme: BinScheme, rng) -> float:
    lo, hi = scheme.duration_edges[bin_m], scheme.duration_edges[bin_m + 1]
    return float(round(rng.uniform(lo, hi) * 60.0)) or 60.0


def generate_corpus(cfg: SyntheticConfig = SyntheticConfig(), scheme: BinScheme = BinScheme()) -> SyntheticCorpus:
    """Stops with ground-truth places and one log entry per stop.

    Every stop gets its own user-day, so logs never overlap within a user.
    """
    rng = np.random.default_rng(cfg.seed)
    pmap = build_place_map(cfg, rng)
    t_prof = planted_time_profiles(scheme)
    d_prof = planted_duration_profiles(scheme)
    stops, truth, logs = [], {}, []
    n_clusters = len(pmap.clusters)
    for i in range(cfg.n_stops):
        cl = pmap.clusters[rng.integers(n_clusters)]
        if cl["mixed"] and rng.random() < cfg.minority_visit_share:
            place = cl["places"][0]
        elif cl["mixed"]:
            place = cl["places"][1 + rng.integers(cfg.dominant_places)]
        else:
            place = cl["places"][rng.integers(len(cl["places"]))]
        c = place.category.index
        user = f"u{i % cfg.n_users:03d}"
        day = cfg.start_day + timedelta(days=i // cfg.n_users)
        start = _sample_start(day, int(rng.choice(scheme.n_time_bins, p=t_prof[c])), scheme, rng)
        duration = _sample_duration(int(rng.choice(scheme.n_duration_bins, p=d_prof[c])), scheme, rng)
        noise = rng.normal(0.0, cfg.position_noise_m, size=2)
        center = _offset(place.anchor, noise[0], noise[1])
        stop = Stop(
            stop_id=f"{user}-{i // cfg.n_users:04d}",
            user_id=user,
            center=center,
            radius=float(rng.uniform(10.0, 50.0)),
            start_time=start,
            duration=duration,
            source=StopSource.CLUSTER,
            member_count=max(2, int(duration // 60)),
        )
        stops.append(stop)
        truth[stop.stop_id] = place
        logs.append(ActivityLogEntry(user, day, start, int(start + duration), place.category))
    return SyntheticCorpus(cfg, pmap, stops, truth, logs, t_prof, d_prof)


# ---------------------------------------------------------------------------
# GPS trajectory fixture for the command-line pipeline


@dataclass(frozen=True)
class FixtureConfig:
    n_users: int = 4
    n_days: int = 3
    sample_s: int = 60
    gps_noise_m: float = 6.0
    speed_mps: float = 8.0
    clusters_per_category: int = 4
    seed: int = 7
    start_day: date = date(2024, 3, 4)


# (category, arrival hour, dwell minutes) of a typical day
_DAY_PLAN = [(R, 6.0, 120), (W, 9.0, 170), (D, 12.1, 55), (W, 13.3, 230), (SH, 17.8, 50), (L, 19.2, 70), (R, 21.0, 120)]


def generate_fixture(out_dir, cfg: FixtureConfig = FixtureConfig()) -> dict[str, Path]:
    """Write trajectories.csv, pois.geojson, rois.geojson and logs.csv to ``out_dir``."""
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir)
    pmap = build_place_map(
        SyntheticConfig(clusters_per_category=cfg.clusters_per_category, mixed_fraction=0.5, seed=cfg.seed), rng
    )
    by_cat: dict[PlaceCategory, list[dict]] = {c: [] for c in CATEGORIES}
    for cl in pmap.clusters:
        by_cat[cl["dominant"]].append(cl)

    rows = ["user,time,lat,lon"]
    logs: list[ActivityLogEntry] = []
    m_lon = METERS_PER_DEGREE * math.cos(math.radians(pmap.clusters[0]["center"].lat))
    for u in range(cfg.n_users):
        user = f"user{u:02d}"
        home = by_cat[R][u % len(by_cat[R])]["places"][1]
        for d in range(cfg.n_days):
            day = cfg.start_day + timedelta(days=d)
            midnight = int(datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp())
            targets = []
            for cat, hour, dwell in _DAY_PLAN:
                if cat is R:
                    place = home
                else:
                    options = by_cat[cat]
                    cluster = options[rng.integers(len(options))]
                    place = cluster["places"][1 + rng.integers(len(cluster["places"]) - 1)]
                arrive = midnight + int(hour * 3600 + rng.integers(-600, 600))
                targets.append((place, arrive, arrive + int(dwell * 60 + rng.integers(-300, 300))))
            pos = targets[0][0].anchor
            t = targets[0][1]
            for place, arrive, leave in targets:
                goal = place.anchor
                east = (goal.lon - pos.lon) * m_lon
                north = (goal.lat - pos.lat) * METERS_PER_DEGREE
                dist = math.hypot(east, north)
                travel = dist / cfg.speed_mps
                depart = max(t, int(arrive - travel))
                while t < arrive:
                    f = min(1.0, max(0.0, (t - depart) / travel)) if travel > 0 else 1.0
                    lat = pos.lat + f * north / METERS_PER_DEGREE
                    lon = pos.lon + f * east / m_lon
                    rows.append(_row(user, t, lat, lon, rng, cfg.gps_noise_m, m_lon))
                    t += cfg.sample_s
                pos = goal
                while t < leave:
                    rows.append(_row(user, t, goal.lat, goal.lon, rng, cfg.gps_noise_m, m_lon))
                    t += cfg.sample_s
                logs.append(ActivityLogEntry(user, day, arrive, leave, place.category))

    paths = {
        "trajectories": out_dir / "trajectories.csv",
        "pois": out_dir / "pois.geojson",
        "rois": out_dir / "rois.geojson",
        "logs": out_dir / "logs.csv",
    }
    atomic_write_text(paths["trajectories"], "\n".join(rows) + "\n")
    atomic_write_text(paths["pois"], json.dumps({"type": "FeatureCollection", "features": pmap.features_poi}))
    atomic_write_text(paths["rois"], json.dumps({"type": "FeatureCollection", "features": pmap.features_roi}))
    atomic_write_text(paths["logs"], format_logs(logs))
    return paths


def _row(user, t, lat, lon, rng, noise, m_lon) -> str:
    dn, de = rng.normal(0.0, noise, size=2)
    ts = datetime.fromtimestamp(t, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return f"{user},{ts},{lat + dn / METERS_PER_DEGREE:.7f},{lon + de / m_lon:.7f}"


def write_corpus_places(pmap: PlaceMap, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    pois, rois = out_dir / "pois.geojson", out_dir / "rois.geojson"
    atomic_write_text(pois, json.dumps({"type": "FeatureCollection", "features": pmap.features_poi}))
    atomic_write_text(rois, json.dumps({"type": "FeatureCollection", "features": pmap.features_roi}))
    return pois, rois
