"""Category transitions between consecutive stops and Viterbi decoding.

Hidden states are the candidate places of each stop; transitions are scored
at the category level, learned from the potential visits of adjacent stops
of the same user and day.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from datetime import date, timezone, tzinfo
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annotate import Annotation, Status
from .artifacts import atomic_write_text, fmt
from .exceptions import EmptySequence, NoTransitions
from .ingest import CATEGORIES, N_CATEGORIES, PlaceCategory, PlaceIndex
from .priors import format_matrix, format_meta, parse_matrix, parse_meta, potential_visit_weights
from .stops import StopWithCandidates

DEFAULT_ALPHA = 1e-3


@dataclass(frozen=True)
class StopSequence:
    user_id: str
    day: date
    stops: tuple[StopWithCandidates, ...]

    def __post_init__(self):
        times = [s.stop.start_time for s in self.stops]
        if times != sorted(times):
            raise ValueError("stops must be sorted by start time")
        if any(s.stop.user_id != self.user_id for s in self.stops):
            raise ValueError("all stops must belong to the sequence's user")

    def __len__(self) -> int:
        return len(self.stops)


def build_sequences(stops: Iterable[StopWithCandidates], tz: tzinfo = timezone.utc) -> list[StopSequence]:
    """Group stops by (user, local start day), each group ordered by start time."""
    key = lambda s: (s.stop.user_id, s.stop.day(tz))
    ordered = sorted(stops, key=lambda s: (*key(s), s.stop.start_time, s.stop.stop_id))
    return [StopSequence(u, d, tuple(g)) for (u, d), g in groupby(ordered, key=key)]


@dataclass
class TransitionMatrix:
    probs: np.ndarray  # [from_category, to_category]
    raw: np.ndarray
    alpha: float = DEFAULT_ALPHA
    pairs: int = 0

    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


class TransitionAccumulator:
    """Co-visit mass of adjacent stops; partial accumulators add."""

    def __init__(self):
        self.raw = np.zeros((N_CATEGORIES, N_CATEGORIES))
        self.pairs = 0

    def add_sequence(self, seq: StopSequence, index: PlaceIndex) -> None:
        weights = [
            potential_visit_weights(s, index) if s.candidates else np.zeros(N_CATEGORIES) for s in seq.stops
        ]
        for a, b in zip(weights, weights[1:]):
            self.raw += np.outer(a, b)
            self.pairs += 1

    def merge(self, other: "TransitionAccumulator") -> "TransitionAccumulator":
        out = TransitionAccumulator()
        out.raw = self.raw + other.raw
        out.pairs = self.pairs + other.pairs
        return out

    def finish(self, alpha: float = DEFAULT_ALPHA) -> TransitionMatrix:
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.pairs == 0:
            warnings.warn("no adjacent stop pairs; using uniform transitions", NoTransitions, stacklevel=2)
            uniform = np.full((N_CATEGORIES, N_CATEGORIES), 1.0 / N_CATEGORIES)
            return TransitionMatrix(uniform, self.raw.copy(), alpha, 0)
        smoothed = self.raw + alpha
        totals = smoothed.sum(axis=1, keepdims=True)
        probs = np.full_like(smoothed, 1.0 / N_CATEGORIES)
        np.divide(smoothed, totals, out=probs, where=totals > 0)
        return TransitionMatrix(probs, self.raw.copy(), alpha, self.pairs)


def learn_transitions(
    sequences: Iterable[StopSequence], index: PlaceIndex, alpha: float = DEFAULT_ALPHA
) -> TransitionMatrix:
    """Sum outer products of adjacent stops' potential visits, smooth, row-normalize."""
    acc = TransitionAccumulator()
    for seq in sequences:
        acc.add_sequence(seq, index)
    return acc.finish(alpha)


def uniform_transitions() -> TransitionMatrix:
    return TransitionMatrix(
        np.full((N_CATEGORIES, N_CATEGORIES), 1.0 / N_CATEGORIES), np.zeros((N_CATEGORIES, N_CATEGORIES)), 0.0
    )


# ---------------------------------------------------------------------------
# decoding


def viterbi_path(
    log_emissions: Sequence[np.ndarray], categories: Sequence[np.ndarray], log_trans: np.ndarray
) -> tuple[list[int], float]:
    """Best state path and its log score.

    ``log_emissions[i][j]`` scores state ``j`` at step ``i`` and
    ``categories[i][j]`` indexes its row/column of ``log_trans``.  Among
    equally scored paths the one with the smallest state indices, compared
    step by step, wins: a backward pass computes best suffix scores and the
    forward trace then takes the first maximizer at each step.
    """
    n = len(log_emissions)
    if n == 0:
        raise EmptySequence("cannot decode an empty sequence")
    suffix = [None] * n
    suffix[-1] = np.asarray(log_emissions[-1], dtype=float)
    for i in range(n - 2, -1, -1):
        step = log_trans[np.ix_(categories[i], categories[i + 1])] + suffix[i + 1][None, :]
        suffix[i] = np.asarray(log_emissions[i], dtype=float) + step.max(axis=1)
    path = [int(np.argmax(suffix[0]))]
    for i in range(1, n):
        prev_cat = categories[i - 1][path[-1]]
        path.append(int(np.argmax(log_trans[prev_cat, categories[i]] + suffix[i])))
    return path, float(suffix[0][path[0]])


def path_log_score(
    log_emissions: Sequence[np.ndarray], categories: Sequence[np.ndarray], log_trans: np.ndarray, path: Sequence[int]
) -> float:
    score = float(log_emissions[0][path[0]])
    for i in range(1, len(path)):
        score += float(log_trans[categories[i - 1][path[i - 1]], categories[i][path[i]]])
        score += float(log_emissions[i][path[i]])
    return score


def _segments(annotations: Sequence[Annotation]) -> list[list[int]]:
    out, cur = [], []
    for i, a in enumerate(annotations):
        if a.status is Status.NO_CANDIDATES:
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(i)
    if cur:
        out.append(cur)
    return out


def viterbi_annotate(annotations: Sequence[Annotation], transitions: TransitionMatrix) -> list[Annotation]:
    """Re-choose each stop's place along the most probable path of a sequence.

    ``annotations`` are the per-stop results of one user-day in time order;
    their visit scores, renormalized per stop, are the emissions.  Stops
    without candidates split the sequence and are returned unchanged.  The
    ranked lists are kept, so ``chosen`` may differ from ``ranked[0]``.
    """
    if not annotations:
        raise EmptySequence("cannot decode an empty sequence")
    out = list(annotations)
    log_t = transitions.log_probs()
    for seg in _segments(annotations):
        emissions, cats = [], []
        for i in seg:
            scores = np.array([c.visit_score for c in annotations[i].ranked])
            total = scores.sum()
            e = scores / total if total > 0 else np.full(len(scores), 1.0 / len(scores))
            with np.errstate(divide="ignore"):
                emissions.append(np.log(e))
            cats.append(np.array([c.category.index for c in annotations[i].ranked]))
        path, _ = viterbi_path(emissions, cats, log_t)
        for i, j in zip(seg, path):
            out[i] = replace(annotations[i], chosen=annotations[i].ranked[j])
    return out


def decode_all(
    annotations: Sequence[Annotation], transitions: TransitionMatrix, tz: tzinfo = timezone.utc, pool=None
) -> list[Annotation]:
    """Viterbi over every user-day; output order follows input order."""
    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(annotations):
        s = a.stop.stop
        groups.setdefault((s.user_id, s.day(tz)), []).append(i)
    keys = sorted(groups)
    orders = [sorted(groups[k], key=lambda i: (annotations[i].stop.stop.start_time, i)) for k in keys]
    mapper = pool.map if pool is not None else map
    decoded = mapper(lambda idx: viterbi_annotate([annotations[i] for i in idx], transitions), orders)
    out = list(annotations)
    for idx, res in zip(orders, decoded):
        for i, a in zip(idx, res):
            out[i] = a
    return out


def write_transitions(matrix: TransitionMatrix, path) -> None:
    path = Path(path)
    names = [c.value for c in CATEGORIES]
    atomic_write_text(path, format_matrix(names, names, matrix.probs))
    meta = {"kind": "transitions", "alpha": fmt(matrix.alpha), "pairs": matrix.pairs}
    for c in CATEGORIES:
        meta[f"raw.{c.value}"] = " ".join(fmt(v) for v in matrix.raw[c.index])
    atomic_write_text(path.with_name(path.name + ".meta"), format_meta(meta))


def read_transitions(path) -> TransitionMatrix:
    path = Path(path)
    labels, names, values = parse_matrix(path.read_text(encoding="utf-8"))
    cols = [PlaceCategory.parse(x).index for x in labels]
    probs = np.zeros((N_CATEGORIES, N_CATEGORIES))
    for n, row in zip(names, values):
        probs[PlaceCategory.parse(n).index, cols] = row
    meta_path = path.with_name(path.name + ".meta")
    meta = parse_meta(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    raw = np.zeros_like(probs)
    for c in CATEGORIES:
        if f"raw.{c.value}" in meta:
            raw[c.index, cols] = [float(x) for x in meta[f"raw.{c.value}"].split()]
    return TransitionMatrix(probs, raw, float(meta.get("alpha", DEFAULT_ALPHA)), int(meta.get("pairs", 0)))
