"""Match annotated stops to activity logs and score category accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone, tzinfo
from typing import Iterable, Sequence

import numpy as np

from .annotate import Annotation, Status
from .artifacts import fmt
from .exceptions import EmptyPairs, NoLogs, SchemaMismatch
from .ingest import CATEGORIES, N_CATEGORIES, PlaceCategory, _open_text, parse_timestamp
from .priors import (
    BinScheme,
    JointPriorTable,
    PriorTable,
    PriorTables,
    _normalize_last_axis,
    bin_duration,
    bin_time,
    smooth_time_prior,
)

LOG_COLUMNS = ("user", "date", "start", "end", "category")


@dataclass(frozen=True)
class ActivityLogEntry:
    user_id: str
    day: date
    start: int  # epoch seconds
    end: int
    category: PlaceCategory
    activity: str = ""

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("log entry must end after it starts")

    @property
    def duration(self) -> int:
        return self.end - self.start

    def sort_key(self):
        return (self.start, self.end, self.category.value, self.activity)


def _log_time(day: date, text: str, tz: tzinfo) -> int:
    text = text.strip()
    if "T" in text or len(text) > 8:
        return parse_timestamp(text, "iso", tz)
    parts = [int(p) for p in text.split(":")]
    t = time(*parts)
    return int(datetime.combine(day, t, tzinfo=tz).timestamp())


def parse_logs(source, tz: tzinfo = timezone.utc) -> tuple[list[ActivityLogEntry], int]:
    """Read ``user,date,start,end,category[,activity]`` rows.

    ``start`` and ``end`` are clock times on ``date`` or full ISO timestamps;
    a clock end earlier than the start rolls over to the next day.  Returns
    the entries and the number of rows skipped, which includes categories
    outside the seven known ones.
    """
    stream, owned = _open_text(source)
    entries, skipped = [], 0
    try:
        reader = csv.DictReader(stream)
        header = reader.fieldnames or []
        missing = [c for c in LOG_COLUMNS if c not in header]
        if missing:
            raise SchemaMismatch(f"activity log is missing column(s) {missing}; header is {header}")
        for row in reader:
            try:
                cat = PlaceCategory.parse(row["category"] or "")
                if cat is None:
                    raise ValueError("unknown category")
                day = date.fromisoformat(row["date"].strip())
                start = _log_time(day, row["start"], tz)
                end = _log_time(day, row["end"], tz)
                if end <= start and ":" in row["end"] and len(row["end"].strip()) <= 8:
                    end += 86_400
                entries.append(
                    ActivityLogEntry(row["user"].strip(), day, start, end, cat, (row.get("activity") or "").strip())
                )
            except (ValueError, TypeError, AttributeError):
                skipped += 1
    finally:
        if owned:
            stream.close()
    return entries, skipped


def format_logs(entries: Iterable[ActivityLogEntry], tz: tzinfo = timezone.utc) -> str:
    lines = ["user,date,start,end,category,activity"]
    for e in entries:
        s = datetime.fromtimestamp(e.start, tz).isoformat()
        t = datetime.fromtimestamp(e.end, tz).isoformat()
        lines.append(f"{e.user_id},{e.day.isoformat()},{s},{t},{e.category.value},{e.activity}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MatchedPair:
    annotation: Annotation
    entry: ActivityLogEntry

    @property
    def correct(self) -> bool:
        return self.annotation.chosen_category is self.entry.category


@dataclass
class MatchResult:
    pairs: list[MatchedPair] = field(default_factory=list)
    matched: int = 0
    unmatched: int = 0
    no_log: int = 0
    no_candidate: int = 0

    @property
    def total(self) -> int:
        return self.matched + self.unmatched + self.no_log + self.no_candidate


def overlap_seconds(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    return max(0.0, min(a_end, b_end) - max(a_start, b_start))


def match_logs(
    annotations: Sequence[Annotation],
    logs: Iterable[ActivityLogEntry],
    min_overlap: float = 0.5,
    tz: tzinfo = timezone.utc,
) -> MatchResult:
    """Pair each stop with the same-user log entry it overlaps most.

    A stop is counted, in this order, as no-candidate, no-log (its user has
    no entry on its date), matched (best overlap >= ``min_overlap`` of the
    stop duration) or unmatched.  Equal overlaps go to the earlier entry, so
    the result does not depend on the order of ``logs``.
    """
    by_user: dict[str, list[ActivityLogEntry]] = {}
    days: set[tuple[str, date]] = set()
    for e in logs:
        by_user.setdefault(e.user_id, []).append(e)
        days.add((e.user_id, e.day))
    for v in by_user.values():
        v.sort(key=ActivityLogEntry.sort_key)

    res = MatchResult()
    for a in annotations:
        s = a.stop.stop
        if a.status is Status.NO_CANDIDATES:
            res.no_candidate += 1
            continue
        if (s.user_id, s.day(tz)) not in days:
            res.no_log += 1
            continue
        best, best_ov = None, 0.0
        for e in by_user.get(s.user_id, ()):
            ov = overlap_seconds(s.start_time, s.end_time, e.start, e.end)
            if ov > best_ov:
                best, best_ov = e, ov
        if best is not None and best_ov >= min_overlap * s.duration:
            res.pairs.append(MatchedPair(a, best))
            res.matched += 1
        else:
            res.unmatched += 1
    return res


def category_tallies(pairs: Sequence[MatchedPair]) -> tuple[np.ndarray, np.ndarray]:
    """``(true_positives, totals)`` per logged category."""
    tp = np.zeros(N_CATEGORIES, dtype=np.int64)
    total = np.zeros(N_CATEGORIES, dtype=np.int64)
    for p in pairs:
        k = p.entry.category.index
        total[k] += 1
        tp[k] += p.correct
    return tp, total


def per_category_accuracy(pairs: Sequence[MatchedPair]) -> dict[PlaceCategory, float]:
    """Accuracy of every logged category; categories never logged are left out."""
    if not pairs:
        raise EmptyPairs("no matched stop/log pairs")
    tp, total = category_tallies(pairs)
    return {c: tp[c.index] / total[c.index] for c in CATEGORIES if total[c.index] > 0}


def overall_and_average(per_category: dict[PlaceCategory, float], totals) -> tuple[float, float]:
    """Overall accuracy weights categories by their totals; average does not."""
    totals = {c: int(totals[c.index] if isinstance(totals, np.ndarray) else totals[c]) for c in per_category}
    n = sum(totals.values())
    if n == 0:
        raise EmptyPairs("no logged visits")
    oa = sum(per_category[c] * totals[c] for c in per_category) / n
    aa = sum(per_category.values()) / len(per_category)
    return float(oa), float(aa)


@dataclass
class EvaluationReport:
    method: str
    accuracy: dict[PlaceCategory, float]
    tp: np.ndarray
    total: np.ndarray
    overall: float
    average: float
    matched: int
    unmatched: int
    no_log: int
    no_candidate: int

    @property
    def stops(self) -> int:
        return self.matched + self.unmatched + self.no_log + self.no_candidate


def evaluate(
    annotations: Sequence[Annotation],
    logs: Iterable[ActivityLogEntry],
    method: str = "",
    min_overlap: float = 0.5,
    tz: tzinfo = timezone.utc,
) -> EvaluationReport:
    m = match_logs(annotations, logs, min_overlap, tz)
    acc = per_category_accuracy(m.pairs)
    tp, total = category_tallies(m.pairs)
    tp_sum = int(tp.sum())
    oa = tp_sum / int(total.sum())
    _, aa = overall_and_average(acc, total)
    return EvaluationReport(method, acc, tp, total, oa, aa, m.matched, m.unmatched, m.no_log, m.no_candidate)


def format_report_kv(report: EvaluationReport) -> str:
    """Machine-readable ``key = value`` lines."""
    lines = [
        f"method = {report.method}",
        f"overall_accuracy = {fmt(report.overall)}",
        f"average_accuracy = {fmt(report.average)}",
        f"stops = {report.stops}",
        f"matched = {report.matched}",
        f"unmatched = {report.unmatched}",
        f"no_log = {report.no_log}",
        f"no_candidate = {report.no_candidate}",
    ]
    for c in CATEGORIES:
        k = c.index
        lines.append(f"tp.{c.value} = {int(report.tp[k])}")
        lines.append(f"total.{c.value} = {int(report.total[k])}")
        if c in report.accuracy:
            lines.append(f"accuracy.{c.value} = {fmt(report.accuracy[c])}")
    return "\n".join(lines) + "\n"


def parse_report_kv(text: str) -> EvaluationReport:
    kv = {}
    for ln in text.splitlines():
        if "=" in ln:
            k, _, v = ln.partition("=")
            kv[k.strip()] = v.strip()
    tp = np.array([int(kv[f"tp.{c.value}"]) for c in CATEGORIES], dtype=np.int64)
    total = np.array([int(kv[f"total.{c.value}"]) for c in CATEGORIES], dtype=np.int64)
    acc = {c: float(kv[f"accuracy.{c.value}"]) for c in CATEGORIES if f"accuracy.{c.value}" in kv}
    return EvaluationReport(
        kv["method"], acc, tp, total, float(kv["overall_accuracy"]), float(kv["average_accuracy"]),
        int(kv["matched"]), int(kv["unmatched"]), int(kv["no_log"]), int(kv["no_candidate"]),
    )


def format_report_human(report: EvaluationReport) -> str:
    width = max(len(c.value) for c in CATEGORIES)
    out = [f"Evaluation ({report.method or 'unnamed'})", ""]
    out.append(f"{'category':<{width}}  {'correct':>7}  {'total':>6}  {'accuracy':>8}")
    for c in CATEGORIES:
        k = c.index
        acc = f"{report.accuracy[c]:.3f}" if c in report.accuracy else "-"
        out.append(f"{c.value:<{width}}  {int(report.tp[k]):>7}  {int(report.total[k]):>6}  {acc:>8}")
    out += [
        "",
        f"overall accuracy (OA): {report.overall:.3f}",
        f"average accuracy (AA): {report.average:.3f}",
        "",
        f"stops {report.stops}: matched {report.matched}, unmatched {report.unmatched}, "
        f"no log {report.no_log}, no candidate {report.no_candidate}",
    ]
    return "\n".join(out) + "\n"


def log_based_priors(
    logs: Sequence[ActivityLogEntry],
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    smooth: bool = False,
) -> PriorTables:
    """Empirical ``P(bin | category)`` straight from labeled visits."""
    logs = list(logs)
    if not logs:
        raise NoLogs("no activity log entries")
    nd, nt = scheme.n_duration_bins, scheme.n_time_bins
    dur = np.zeros((N_CATEGORIES, nd))
    tim = np.zeros((N_CATEGORIES, nt))
    joint = np.zeros((N_CATEGORIES, nd, nt))
    for e in logs:
        m = bin_duration(e.duration, scheme)
        k = bin_time(e.start, tz, scheme)
        c = e.category.index
        dur[c, m] += 1
        tim[c, k] += 1
        joint[c, m, k] += 1
    time_table = PriorTable("time", scheme.time_labels, _normalize_last_axis(tim),
                            tim.astype(np.int64), tim.sum(axis=0).astype(np.int64))
    if smooth:
        time_table = smooth_time_prior(time_table, scheme.smoothing_window)
    return PriorTables(
        duration=PriorTable("duration", scheme.duration_labels, _normalize_last_axis(dur),
                            dur.astype(np.int64), dur.sum(axis=0).astype(np.int64)),
        time=time_table,
        joint=JointPriorTable(_normalize_last_axis(joint), joint.astype(np.int64),
                              joint.sum(axis=0).astype(np.int64), scheme.duration_labels, scheme.time_labels),
    )


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
