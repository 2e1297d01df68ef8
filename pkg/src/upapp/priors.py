"""Visiting-time and duration priors learned from potential visits.

Every stop spreads TF-IDF weighted *potential visits* over the place
categories around it.  Averaging those weights per time or duration bin and
normalizing each category across bins yields ``P(bin | category)`` without
any labeled data.
"""

from __future__ import annotations

import bisect
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone, tzinfo
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .artifacts import atomic_write_text, fmt
from .exceptions import EmptyCandidates, NonPositiveDuration, NoStops
from .ingest import CATEGORIES, N_CATEGORIES, PlaceCategory, PlaceIndex
from .stops import StopWithCandidates

DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class BinScheme:
    duration_edges: tuple[float, ...] = (0, 30, 90, 180, 300, 1440)  # minutes
    early_hours: int = 6  # hours [0, early_hours) share one bin
    smoothing_window: int = 3

    def __post_init__(self):
        edges = tuple(float(e) for e in self.duration_edges)
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"duration edges must be strictly ascending, got {edges}")
        object.__setattr__(self, "duration_edges", edges)
        if not 1 <= self.early_hours <= 23:
            raise ValueError("early_hours must be in [1, 23]")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing window must be odd and >= 1")

    @property
    def n_duration_bins(self) -> int:
        return len(self.duration_edges) - 1

    @property
    def n_time_bins(self) -> int:
        return 25 - self.early_hours

    @property
    def duration_labels(self) -> list[str]:
        e = self.duration_edges
        return [f"{e[i]:g}-{e[i + 1]:g}min" for i in range(self.n_duration_bins)]

    @property
    def time_labels(self) -> list[str]:
        labels = [f"00-{self.early_hours:02d}h"]
        labels += [f"{h:02d}-{h + 1:02d}h" for h in range(self.early_hours, 24)]
        return labels


def bin_duration(duration: float, scheme: BinScheme = BinScheme()) -> int:
    """Half-open minute bins; anything past the last edge lands in the last bin."""
    if not duration > 0:
        raise NonPositiveDuration(f"duration must be positive, got {duration}")
    minutes = duration / 60.0
    k = bisect.bisect_right(scheme.duration_edges, minutes) - 1
    return min(max(k, 0), scheme.n_duration_bins - 1)


def bin_time(timestamp, tz: tzinfo = timezone.utc, scheme: BinScheme = BinScheme()) -> int:
    """Local hour bin: one early-morning bin, then one bin per hour."""
    if isinstance(timestamp, datetime):
        dt = timestamp.astimezone(tz) if timestamp.tzinfo else timestamp
    else:
        dt = datetime.fromtimestamp(timestamp, tz)
    h = dt.hour
    return 0 if h < scheme.early_hours else 1 + h - scheme.early_hours


def tfidf_weights(local_counts, global_counts) -> np.ndarray:
    """Per-category potential visits of one stop.

    ``local_counts`` are candidate counts per category around the stop,
    ``global_counts`` the counts over the whole area.  The log is natural.
    """
    local = np.asarray(local_counts, dtype=float)
    glob = np.asarray(global_counts, dtype=float)
    n_local = local.sum()
    if n_local <= 0:
        raise EmptyCandidates("stop has no candidate places")
    present = (local > 0) & (glob > 0)
    w = np.zeros_like(local)
    w[present] = local[present] / n_local * np.log(glob.sum() / glob[present])
    return w


def potential_visit_weights(stop: StopWithCandidates, index: PlaceIndex) -> np.ndarray:
    return tfidf_weights(stop.category_counts(), index.global_counts)


@dataclass
class PriorTable:
    """``probs[category, bin]``; rows without any potential visits stay zero."""

    kind: str
    labels: list[str]
    probs: np.ndarray
    support: np.ndarray  # stops with positive weight per cell
    bin_counts: np.ndarray  # stops per bin
    smoothing_window: int = 1

    @property
    def empty_rows(self) -> np.ndarray:
        return self.probs.sum(axis=1) == 0

    def row(self, category: PlaceCategory) -> np.ndarray:
        return self.probs[category.index]


@dataclass
class JointPriorTable:
    """``probs[category, duration_bin, time_bin]``; each supported time slice sums to 1."""

    probs: np.ndarray
    support: np.ndarray
    cell_counts: np.ndarray  # stops per (duration_bin, time_bin)
    duration_labels: list[str] = field(default_factory=list)
    time_labels: list[str] = field(default_factory=list)


@dataclass
class PriorTables:
    duration: PriorTable
    time: PriorTable
    joint: JointPriorTable | None = None


class VisitAccumulator:
    """Per-bin sums of potential visits; partial accumulators merge by addition."""

    def __init__(self, shape: tuple[int, ...]):
        self.sums = np.zeros((N_CATEGORIES, *shape))
        self.support = np.zeros((N_CATEGORIES, *shape), dtype=np.int64)
        self.counts = np.zeros(shape, dtype=np.int64)

    def add(self, weights: np.ndarray, cell) -> None:
        idx = (slice(None), *np.atleast_1d(cell))
        self.sums[idx] += weights
        self.support[idx] += weights > 0
        self.counts[tuple(np.atleast_1d(cell))] += 1

    def merge(self, other: "VisitAccumulator") -> "VisitAccumulator":
        out = VisitAccumulator(self.counts.shape)
        out.sums = self.sums + other.sums
        out.support = self.support + other.support
        out.counts = self.counts + other.counts
        return out

    def mean_visits(self, exclusive: bool = False) -> np.ndarray:
        denom = self.support if exclusive else np.broadcast_to(self.counts, self.sums.shape)
        out = np.zeros_like(self.sums)
        np.divide(self.sums, denom, out=out, where=denom > 0)
        return out


def _normalize_last_axis(visits: np.ndarray) -> np.ndarray:
    totals = visits.sum(axis=-1, keepdims=True)
    out = np.zeros_like(visits)
    np.divide(visits, totals, out=out, where=totals > 0)
    return out


def prior_from_weights(
    weights, bins, n_bins: int, kind: str = "duration", labels=None, exclusive: bool = False
) -> PriorTable:
    """Prior table from explicit per-stop potential visits and bin indices.

    ``weights`` is ``(n_stops, n_categories)``.  Bins with no stops count
    as zero visits.  ``exclusive`` averages only over stops that actually
    credit the category.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or len(weights) == 0:
        raise NoStops("no stops to learn priors from")
    acc = VisitAccumulator((n_bins,))
    for w, b in zip(weights, bins):
        acc.add(w, int(b))
    return _table_from(acc, kind, labels or [str(i) for i in range(n_bins)], exclusive)


def _table_from(acc: VisitAccumulator, kind: str, labels, exclusive: bool) -> PriorTable:
    return PriorTable(
        kind=kind,
        labels=list(labels),
        probs=_normalize_last_axis(acc.mean_visits(exclusive)),
        support=acc.support.copy(),
        bin_counts=acc.counts.copy(),
    )


def _weighted(stops: Iterable[StopWithCandidates], index: PlaceIndex):
    any_stop = False
    for s in stops:
        if not s.candidates:
            continue
        any_stop = True
        yield s, potential_visit_weights(s, index)
    if not any_stop:
        raise NoStops("no stop has candidate places")


def build_duration_prior(
    stops: Sequence[StopWithCandidates],
    index: PlaceIndex,
    scheme: BinScheme = BinScheme(),
    exclusive: bool = False,
) -> PriorTable:
    acc = VisitAccumulator((scheme.n_duration_bins,))
    for s, w in _weighted(stops, index):
        acc.add(w, bin_duration(s.stop.duration, scheme))
    return _table_from(acc, "duration", scheme.duration_labels, exclusive)


def build_time_prior(
    stops: Sequence[StopWithCandidates],
    index: PlaceIndex,
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    exclusive: bool = False,
    smooth: bool = True,
) -> PriorTable:
    acc = VisitAccumulator((scheme.n_time_bins,))
    for s, w in _weighted(stops, index):
        acc.add(w, bin_time(s.stop.start_time, tz, scheme))
    table = _table_from(acc, "time", scheme.time_labels, exclusive)
    return smooth_time_prior(table, scheme.smoothing_window) if smooth else table


def smooth_time_prior(table: PriorTable, window: int = 3) -> PriorTable:
    """Centered moving mean along the bins, then per-row renormalization.

    Edges are padded by repeating the end value, which keeps uniform rows
    fixed and conserves the mass of an interior spike.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window == 1:
        return table
    h = window // 2
    padded = np.pad(table.probs, ((0, 0), (h, h)), mode="edge")
    kernel = np.ones(window) / window
    smoothed = np.array([np.convolve(row, kernel, mode="valid") for row in padded])
    return PriorTable(
        kind=table.kind,
        labels=list(table.labels),
        probs=_normalize_last_axis(smoothed),
        support=table.support.copy(),
        bin_counts=table.bin_counts.copy(),
        smoothing_window=window,
    )


def build_joint_prior(
    stops: Sequence[StopWithCandidates],
    index: PlaceIndex,
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    exclusive: bool = False,
) -> JointPriorTable:
    """``P(time_bin | category, duration_bin)`` from stops grouped by both bins."""
    acc = VisitAccumulator((scheme.n_duration_bins, scheme.n_time_bins))
    for s, w in _weighted(stops, index):
        acc.add(w, (bin_duration(s.stop.duration, scheme), bin_time(s.stop.start_time, tz, scheme)))
    return JointPriorTable(
        probs=_normalize_last_axis(acc.mean_visits(exclusive)),
        support=acc.support.copy(),
        cell_counts=acc.counts.copy(),
        duration_labels=scheme.duration_labels,
        time_labels=scheme.time_labels,
    )


def build_priors(
    stops: Sequence[StopWithCandidates],
    index: PlaceIndex,
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    joint: bool = True,
    exclusive: bool = False,
) -> PriorTables:
    stops = list(stops)
    return PriorTables(
        duration=build_duration_prior(stops, index, scheme, exclusive),
        time=build_time_prior(stops, index, scheme, tz, exclusive),
        joint=build_joint_prior(stops, index, scheme, tz, exclusive) if joint else None,
    )


def lookup_prior(table: PriorTable, category: PlaceCategory, bin: int, floor: float = DEFAULT_FLOOR) -> float:
    return max(float(table.probs[category.index, bin]), floor)


def lookup_joint(
    table: JointPriorTable, category: PlaceCategory, duration_bin: int, time_bin: int, floor: float = DEFAULT_FLOOR
) -> float:
    return max(float(table.probs[category.index, duration_bin, time_bin]), floor)


# ---------------------------------------------------------------------------
# text matrix format


def format_matrix(labels: Sequence[str], row_names: Sequence[str], values: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write(",".join(["category", *labels]) + "\n")
    for name, row in zip(row_names, values):
        buf.write(",".join([name, *(fmt(v) for v in row)]) + "\n")
    return buf.getvalue()


def parse_matrix(text: str) -> tuple[list[str], list[str], np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    labels = lines[0].split(",")[1:]
    names, rows = [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        names.append(cells[0])
        rows.append([float(v) for v in cells[1:]])
    return labels, names, np.array(rows, dtype=float)


def format_meta(meta: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in meta.items())


def parse_meta(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        if "=" in ln and not ln.lstrip().startswith("#"):
            k, _, v = ln.partition("=")
            out[k.strip()] = v.strip()
    return out


def _ints(a) -> str:
    return " ".join(str(int(x)) for x in np.ravel(a))


def write_prior_table(table: PriorTable, path, floor: float = DEFAULT_FLOOR, scheme: BinScheme | None = None) -> None:
    """``<path>`` holds the matrix, ``<path>.meta`` the sidecar metadata."""
    path = Path(path)
    atomic_write_text(path, format_matrix(table.labels, [c.value for c in CATEGORIES], table.probs))
    meta = {
        "kind": table.kind,
        "bins": " ".join(table.labels),
        "smoothing_window": table.smoothing_window,
        "floor": fmt(floor),
        "stops": int(table.bin_counts.sum()),
        "bin_counts": _ints(table.bin_counts),
    }
    if scheme is not None:
        meta["duration_edges"] = " ".join(f"{e:g}" for e in scheme.duration_edges)
        meta["early_hours"] = scheme.early_hours
    for c in CATEGORIES:
        meta[f"support.{c.value}"] = _ints(table.support[c.index])
    atomic_write_text(path.with_name(path.name + ".meta"), format_meta(meta))


def read_prior_table(path) -> PriorTable:
    path = Path(path)
    labels, names, probs = parse_matrix(path.read_text(encoding="utf-8"))
    order = [PlaceCategory.parse(n).index for n in names]
    full = np.zeros((N_CATEGORIES, len(labels)))
    full[order] = probs
    meta_path = path.with_name(path.name + ".meta")
    meta = parse_meta(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    support = np.zeros_like(full, dtype=np.int64)
    for c in CATEGORIES:
        if f"support.{c.value}" in meta:
            support[c.index] = [int(x) for x in meta[f"support.{c.value}"].split()]
    counts = np.array([int(x) for x in meta.get("bin_counts", "").split()] or [0] * len(labels), dtype=np.int64)
    return PriorTable(
        kind=meta.get("kind", path.stem),
        labels=labels,
        probs=full,
        support=support,
        bin_counts=counts,
        smoothing_window=int(meta.get("smoothing_window", 1)),
    )


def write_joint_table(table: JointPriorTable, path, floor: float = DEFAULT_FLOOR) -> None:
    """Flattened as one row per ``category|duration_bin``, columns are time bins."""
    path = Path(path)
    names, rows = [], []
    for c in CATEGORIES:
        for m, dl in enumerate(table.duration_labels):
            names.append(f"{c.value}|{dl}")
            rows.append(table.probs[c.index, m])
    atomic_write_text(path, format_matrix(table.time_labels, names, np.array(rows)))
    meta = {
        "kind": "joint",
        "duration_bins": " ".join(table.duration_labels),
        "time_bins": " ".join(table.time_labels),
        "floor": fmt(floor),
        "stops": int(table.cell_counts.sum()),
        "cell_counts": _ints(table.cell_counts),
    }
    atomic_write_text(path.with_name(path.name + ".meta"), format_meta(meta))


def read_joint_table(path) -> JointPriorTable:
    path = Path(path)
    time_labels, names, probs = parse_matrix(path.read_text(encoding="utf-8"))
    dur_labels: list[str] = []
    for n in names:
        dl = n.split("|", 1)[1]
        if dl not in dur_labels:
            dur_labels.append(dl)
    full = np.zeros((N_CATEGORIES, len(dur_labels), len(time_labels)))
    for n, row in zip(names, probs):
        cat, dl = n.split("|", 1)
        full[PlaceCategory.parse(cat).index, dur_labels.index(dl)] = row
    meta = parse_meta(path.with_name(path.name + ".meta").read_text(encoding="utf-8"))
    counts = np.array([int(x) for x in meta["cell_counts"].split()], dtype=np.int64).reshape(
        len(dur_labels), len(time_labels)
    )
    return JointPriorTable(
        probs=full,
        support=np.zeros(full.shape, dtype=np.int64),
        cell_counts=counts,
        duration_labels=dur_labels,
        time_labels=time_labels,
    )
