"""Stop extraction (dwell clusters, signal gaps, overnight gaps), merging,
and candidate-place search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone, tzinfo
from enum import Enum
from itertools import groupby
from typing import Iterable, Sequence

import numpy as np

from . import geo
from .exceptions import SchemaMismatch
from .geo import Circle, GeoPoint, PlanarPoint, Topology
from .ingest import N_CATEGORIES, Place, PlaceIndex, Trajectory, local_date

GPS_ACCURACY_M = 15.0
DAY_SECONDS = 86_400


class StopSource(Enum):
    CLUSTER = "cluster"
    SIGNAL_LOSS = "signal_loss"
    DAY_BOUNDARY = "day_boundary"


@dataclass(frozen=True)
class Stop:
    stop_id: str
    user_id: str
    center: GeoPoint
    radius: float
    start_time: int  # epoch seconds
    duration: float  # seconds
    source: StopSource
    member_count: int

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"stop radius must be >= 0, got {self.radius}")
        if not self.duration > 0:
            raise ValueError(f"stop duration must be > 0, got {self.duration}")

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def day(self, tz: tzinfo = timezone.utc) -> date:
        return local_date(self.start_time, tz)


@dataclass(frozen=True)
class StopParams:
    d1: float = 100.0
    t1: float = 600.0
    d2: float = 200.0
    t2: float = 1200.0
    d3: float = 200.0
    d_merge: float = 90.0
    t_merge: float = 540.0
    search_radius: float = 200.0
    radius_floor: float = GPS_ACCURACY_M


@dataclass(frozen=True, eq=False)
class CandidatePlace:
    place: Place
    distance: float
    topology: Topology
    overlap: float | None = None  # intersected share of the stop circle, ROIs only

    @property
    def place_id(self) -> str:
        return self.place.place_id

    @property
    def category(self):
        return self.place.category


@dataclass(frozen=True, eq=False)
class StopWithCandidates:
    stop: Stop
    candidates: tuple[CandidatePlace, ...] = field(default=())

    def category_counts(self) -> np.ndarray:
        counts = np.zeros(N_CATEGORIES, dtype=np.int64)
        for c in self.candidates:
            counts[c.category.index] += 1
        return counts


# ---------------------------------------------------------------------------
# detection


def _run_end(lats: np.ndarray, lons: np.ndarray, i: int, d1: float) -> int:
    """Last index j such that every point in (i, j] lies within d1 of point i."""
    n = len(lats)
    j = i
    step = 32
    while j + 1 < n:
        hi = min(n, j + 1 + step)
        d = geo.haversine(lats[i], lons[i], lats[j + 1 : hi], lons[j + 1 : hi])
        far = np.flatnonzero(np.atleast_1d(d) >= d1)
        if len(far):
            return j + int(far[0])
        j = hi - 1
        step *= 2
    return j


def _stop_from_members(traj: Trajectory, lo: int, hi: int, source=StopSource.CLUSTER) -> Stop:
    lats, lons = traj.lats[lo : hi + 1], traj.lons[lo : hi + 1]
    center = GeoPoint(float(lats.mean()), float(lons.mean()))
    radius = float(np.max(geo.haversine(center.lat, center.lon, lats, lons))) if hi > lo else 0.0
    return Stop(
        stop_id="",
        user_id=traj.user_id,
        center=center,
        radius=radius,
        start_time=int(traj.times[lo]),
        duration=float(traj.times[hi] - traj.times[lo]),
        source=source,
        member_count=hi - lo + 1,
    )


def cluster_spans(traj: Trajectory, d1: float = 100.0, t1: float = 600.0) -> list[tuple[int, int]]:
    """Index ranges ``(first, last)`` of the dwell clusters, left to right.

    A point's neighborhood is the longest run of following points all
    within ``d1`` of it; the run's time span is its density.  Points with
    density >= ``t1`` are core points.  A stop starts at the first unused
    core point and absorbs the runs of every core point it reaches.
    """
    if d1 <= 0 or t1 <= 0:
        raise ValueError("d1 and t1 must be positive")
    lats, lons, times = traj.lats, traj.lons, traj.times
    n = len(traj)
    spans = []
    i = 0
    while i < n:
        e = _run_end(lats, lons, i, d1)
        if times[e] - times[i] < t1:
            i += 1
            continue
        end = e
        k = i + 1
        while k <= end:
            ek = _run_end(lats, lons, k, d1)
            if ek > end and times[ek] - times[k] >= t1:
                end = ek
            k += 1
        spans.append((i, end))
        i = end + 1
    return spans


def detect_cluster_stops(traj: Trajectory, d1: float = 100.0, t1: float = 600.0) -> list[Stop]:
    return [_stop_from_members(traj, lo, hi) for lo, hi in cluster_spans(traj, d1, t1)]


def _pair_stop(user_id, lat_a, lon_a, t_a, lat_b, lon_b, t_b, source, max_duration=None) -> Stop:
    d = geo.haversine(lat_a, lon_a, lat_b, lon_b)
    gap = float(t_b - t_a)
    if max_duration is not None:
        gap = min(gap, max_duration)
    return Stop(
        stop_id="",
        user_id=user_id,
        center=GeoPoint((lat_a + lat_b) / 2, (lon_a + lon_b) / 2),
        radius=d / 2,
        start_time=int(t_a),
        duration=gap,
        source=source,
        member_count=2,
    )


def detect_signal_loss_stops(traj: Trajectory, d2: float = 200.0, t2: float = 1200.0) -> list[Stop]:
    """Adjacent point pairs separated by more than ``t2`` s but less than ``d2`` m."""
    if len(traj) < 2:
        return []
    gaps = np.diff(traj.times)
    dist = geo.haversine(traj.lats[:-1], traj.lons[:-1], traj.lats[1:], traj.lons[1:])
    out = []
    for k in np.flatnonzero((gaps > t2) & (np.atleast_1d(dist) < d2)):
        out.append(
            _pair_stop(
                traj.user_id,
                float(traj.lats[k]), float(traj.lons[k]), int(traj.times[k]),
                float(traj.lats[k + 1]), float(traj.lons[k + 1]), int(traj.times[k + 1]),
                StopSource.SIGNAL_LOSS,
            )
        )
    return out


def detect_day_boundary_stops(days: Sequence[Trajectory], d3: float = 200.0) -> list[Stop]:
    """Overnight stops between the last point of a day and the first of the next.

    Only adjacent calendar days pair up; the duration is capped at one day.
    """
    out = []
    days = sorted((d for d in days if len(d)), key=lambda t: t.day)
    for a, b in zip(days, days[1:]):
        if b.day - a.day != timedelta(days=1):
            continue
        lat_a, lon_a, t_a = float(a.lats[-1]), float(a.lons[-1]), int(a.times[-1])
        lat_b, lon_b, t_b = float(b.lats[0]), float(b.lons[0]), int(b.times[0])
        if t_b <= t_a or geo.haversine(lat_a, lon_a, lat_b, lon_b) >= d3:
            continue
        out.append(_pair_stop(a.user_id, lat_a, lon_a, t_a, lat_b, lon_b, t_b, StopSource.DAY_BOUNDARY, DAY_SECONDS))
    return out


def _combine(a: Stop, b: Stop) -> Stop:
    w = a.member_count + b.member_count
    center = GeoPoint(
        (a.center.lat * a.member_count + b.center.lat * b.member_count) / w,
        (a.center.lon * a.member_count + b.center.lon * b.member_count) / w,
    )
    radius = max(geo.haversine_distance(center, s.center) + s.radius for s in (a, b))
    start = min(a.start_time, b.start_time)
    end = max(a.end_time, b.end_time)
    first = a if (a.start_time, 0) <= (b.start_time, 1) else b
    return Stop(
        stop_id=first.stop_id,
        user_id=a.user_id,
        center=center,
        radius=radius,
        start_time=start,
        duration=end - start,
        source=first.source,
        member_count=w,
    )


def _mergeable(a: Stop, b: Stop, d_merge: float, t_merge: float) -> bool:
    return geo.haversine_distance(a.center, b.center) < d_merge and (b.start_time - a.end_time) < t_merge


def _stop_order(s: Stop):
    return (s.start_time, s.duration, s.source.value, s.center.lat, s.center.lon)


def merge_stops(stops: Iterable[Stop], d_merge: float = 90.0, t_merge: float = 540.0) -> list[Stop]:
    """Merge consecutive stops of a user that are close in space and time.

    Repeats until no pair merges.  Output is sorted by (user, start).
    """
    out: list[Stop] = []
    ordered = sorted(stops, key=lambda s: (s.user_id, *_stop_order(s)))
    for _, group in groupby(ordered, key=lambda s: s.user_id):
        current = list(group)
        changed = True
        while changed:
            changed = False
            merged: list[Stop] = []
            for s in current:
                if merged and _mergeable(merged[-1], s, d_merge, t_merge):
                    merged[-1] = _combine(merged[-1], s)
                    changed = True
                else:
                    merged.append(s)
            current = sorted(merged, key=_stop_order)
        out.extend(current)
    return out


def assign_stop_ids(stops: Sequence[Stop]) -> list[Stop]:
    out = []
    for user, group in groupby(stops, key=lambda s: s.user_id):
        for k, s in enumerate(group):
            out.append(replace(s, stop_id=f"{user}-{k:04d}"))
    return out


def detect_user_stops(days: Sequence[Trajectory], params: StopParams = StopParams()) -> list[Stop]:
    """All three stop kinds for one user's daily trajectories, merged and numbered."""
    raw: list[Stop] = []
    for traj in days:
        raw.extend(detect_cluster_stops(traj, params.d1, params.t1))
        raw.extend(detect_signal_loss_stops(traj, params.d2, params.t2))
    raw.extend(detect_day_boundary_stops(days, params.d3))
    return assign_stop_ids(merge_stops(raw, params.d_merge, params.t_merge))


def detect_stops(trajectories: Iterable[Trajectory], params: StopParams = StopParams(), pool=None) -> list[Stop]:
    """Stops for every user; ``pool`` may be an executor to spread users over workers."""
    by_user: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        by_user.setdefault(t.user_id, []).append(t)
    users = sorted(by_user)
    mapper = pool.map if pool is not None else map
    results = mapper(lambda u: detect_user_stops(by_user[u], params), users)
    return [s for group in results for s in group]


# ---------------------------------------------------------------------------
# candidates


def stop_circle(stop: Stop, radius_floor: float = GPS_ACCURACY_M) -> Circle:
    return Circle(PlanarPoint(0.0, 0.0), max(stop.radius, radius_floor))


def make_candidate(stop: Stop, place: Place, distance: float, radius_floor: float = GPS_ACCURACY_M) -> CandidatePlace:
    circle = stop_circle(stop, radius_floor)
    if not place.is_roi:
        topo = Topology.CONTAIN if distance <= circle.radius else Topology.DISJOINT
        return CandidatePlace(place, distance, topo)
    geom = place.planar_geometry(stop.center)
    topo = geo.classify_topology(circle, geom)
    overlap = None
    if topo is Topology.INTERSECT:
        overlap = min(geo.intersection_area(circle, geom) / circle.area, 1.0)
    return CandidatePlace(place, distance, topo, overlap)


def attach_candidates(
    stop: Stop,
    index: PlaceIndex,
    search_radius: float = 200.0,
    radius_floor: float = GPS_ACCURACY_M,
) -> StopWithCandidates:
    """Every place within ``search_radius`` of the stop center, nearest first."""
    hits = index.query(stop.center, search_radius)
    return StopWithCandidates(stop, tuple(make_candidate(stop, p, d, radius_floor) for p, d in hits))


# ---------------------------------------------------------------------------
# staged files

STOP_COLUMNS = (
    "stop_id", "user_id", "lat", "lon", "radius_m", "start_time", "duration_s", "source", "member_count",
)
CANDIDATE_COLUMNS = ("stop_id", "place_id", "distance", "topology", "overlap")


def iso_utc(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso_utc(text: str) -> int:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_stops(stops: Iterable[Stop]) -> str:
    # repr keeps floats exact across stages
    lines = [",".join(STOP_COLUMNS)]
    for s in stops:
        lines.append(
            f"{s.stop_id},{s.user_id},{s.center.lat!r},{s.center.lon!r},{s.radius!r},"
            f"{iso_utc(s.start_time)},{s.duration!r},{s.source.value},{s.member_count}"
        )
    return "\n".join(lines) + "\n"


def read_stops(path) -> list[Stop]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STOP_COLUMNS:
            raise SchemaMismatch(f"{path}: expected columns {STOP_COLUMNS}")
        return [
            Stop(
                stop_id=r["stop_id"],
                user_id=r["user_id"],
                center=GeoPoint(float(r["lat"]), float(r["lon"])),
                radius=float(r["radius_m"]),
                start_time=parse_iso_utc(r["start_time"]),
                duration=float(r["duration_s"]),
                source=StopSource(r["source"]),
                member_count=int(r["member_count"]),
            )
            for r in reader
        ]


def format_candidates(stops: Iterable[StopWithCandidates]) -> str:
    lines = [",".join(CANDIDATE_COLUMNS)]
    for s in stops:
        for c in s.candidates:
            overlap = "" if c.overlap is None else repr(c.overlap)
            lines.append(f"{s.stop.stop_id},{c.place_id},{c.distance!r},{c.topology.value},{overlap}")
    return "\n".join(lines) + "\n"


def read_candidates(path, stops: Sequence[Stop], index: PlaceIndex) -> list[StopWithCandidates]:
    """Re-attach persisted candidates to their stops, keeping the stop order."""
    found: dict[str, list[CandidatePlace]] = {s.stop_id: [] for s in stops}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CANDIDATE_COLUMNS:
            raise SchemaMismatch(f"{path}: expected columns {CANDIDATE_COLUMNS}")
        for r in reader:
            overlap = float(r["overlap"]) if r["overlap"] else None
            cand = CandidatePlace(index[r["place_id"]], float(r["distance"]), Topology(r["topology"]), overlap)
            found[r["stop_id"]].append(cand)
    return [StopWithCandidates(s, tuple(found[s.stop_id])) for s in stops]
