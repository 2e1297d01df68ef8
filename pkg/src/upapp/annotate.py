"""Score candidate places of each stop and pick the most probable visit.

A candidate's score is the product of its spatial probability, the
visiting-time and duration priors of its category, and the normalized
importance of that category among the stop's candidates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import timezone, tzinfo
from enum import Enum
from typing import Sequence

import numpy as np

from .artifacts import atomic_write_text, fmt
from .exceptions import EmptyCandidates, SchemaMismatch
from .geo import GeoPoint
from .ingest import N_CATEGORIES, PlaceCategory, PlaceIndex
from .priors import (
    DEFAULT_FLOOR,
    BinScheme,
    JointPriorTable,
    PriorTable,
    PriorTables,
    bin_duration,
    bin_time,
    lookup_joint,
    lookup_prior,
)
from .spatial import SpatialParams, spatial_scores
from .stops import GPS_ACCURACY_M, CandidatePlace, Stop, StopSource, StopWithCandidates, iso_utc, parse_iso_utc


class Method(Enum):
    SPATIAL_ONLY = "spatial-only"
    SPATIOTEMPORAL = "spatiotemporal"
    UPAPP = "upapp"
    UPAPP_HMM = "upapp-hmm"
    UPAPP_JOINT = "upapp-joint"


class Status(Enum):
    ANNOTATED = "annotated"
    NO_CANDIDATES = "no_candidates"


@dataclass(frozen=True)
class Scoring:
    """Which factors enter the visit score, plus the shared parameters."""

    spatial: SpatialParams = SpatialParams()
    scheme: BinScheme = BinScheme()
    tz: tzinfo = timezone.utc
    floor: float = DEFAULT_FLOOR
    radius_floor: float = GPS_ACCURACY_M
    use_temporal: bool = True
    use_importance: bool = True
    joint: bool = False

    @classmethod
    def for_method(cls, method: Method | str, **kwargs) -> "Scoring":
        method = Method(method)
        flags = {
            Method.SPATIAL_ONLY: dict(use_temporal=False, use_importance=False),
            Method.SPATIOTEMPORAL: dict(use_temporal=True, use_importance=False),
            Method.UPAPP: dict(),
            Method.UPAPP_HMM: dict(),
            Method.UPAPP_JOINT: dict(joint=True),
        }[method]
        return cls(**{**kwargs, **flags})


@dataclass(frozen=True, eq=False)
class CandidateScore:
    candidate: CandidatePlace
    relative_spatial: float
    spatial: float
    p_time: float
    p_duration: float
    spatiotemporal: float
    importance: float
    normalized_importance: float
    visit_score: float

    @property
    def place_id(self) -> str:
        return self.candidate.place_id

    @property
    def category(self):
        return self.candidate.category

    def rank_key(self):
        return (-self.visit_score, self.candidate.distance, self.candidate.place_id)


@dataclass(frozen=True, eq=False)
class Annotation:
    stop: StopWithCandidates
    ranked: tuple[CandidateScore, ...] = field(default=())
    status: Status = Status.NO_CANDIDATES
    chosen: CandidateScore | None = None

    @property
    def chosen_place(self):
        return self.chosen.candidate.place if self.chosen is not None else None

    @property
    def chosen_category(self):
        return self.chosen.category if self.chosen is not None else None


def spatiotemporal_score(
    candidate: CandidatePlace,
    stop: Stop,
    priors: PriorTables,
    spatial: float,
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    floor: float = DEFAULT_FLOOR,
) -> float:
    """Time prior x duration prior x spatial probability, with floored lookups."""
    p_t = lookup_prior(priors.time, candidate.category, bin_time(stop.start_time, tz, scheme), floor)
    p_d = lookup_prior(priors.duration, candidate.category, bin_duration(stop.duration, scheme), floor)
    return p_t * p_d * spatial


def spatiotemporal_score_joint(
    candidate: CandidatePlace,
    stop: Stop,
    joint: JointPriorTable,
    duration_prior: PriorTable,
    spatial: float,
    scheme: BinScheme = BinScheme(),
    tz: tzinfo = timezone.utc,
    floor: float = DEFAULT_FLOOR,
) -> float:
    """Variant where the visiting time is conditioned on the duration bin too."""
    m = bin_duration(stop.duration, scheme)
    k = bin_time(stop.start_time, tz, scheme)
    p_t = lookup_joint(joint, candidate.category, m, k, floor)
    p_d = lookup_prior(duration_prior, candidate.category, m, floor)
    return p_t * p_d * spatial


def category_importance(candidates: Sequence[CandidatePlace], index: PlaceIndex) -> tuple[np.ndarray, np.ndarray]:
    """``(importance, normalized)`` per candidate.

    Each candidate inherits the TF-IDF importance of its category within the
    candidate set; normalization runs over candidates, so same-category
    places share the category's weight.  An all-zero set becomes uniform.
    """
    if not candidates:
        raise EmptyCandidates("importance of an empty candidate set")
    cats = np.array([c.category.index for c in candidates])
    local = np.bincount(cats, minlength=N_CATEGORIES).astype(float)
    glob = index.global_counts.astype(float)
    total = glob.sum()
    per_cat = np.zeros(N_CATEGORIES)
    present = (local > 0) & (glob > 0)
    per_cat[present] = local[present] / len(candidates) * np.log(total / glob[present])
    imp = per_cat[cats]
    s = imp.sum()
    norm = imp / s if s > 0 else np.full(len(candidates), 1.0 / len(candidates))
    return imp, norm


def annotate_stop(
    stop: StopWithCandidates,
    priors: PriorTables | None,
    index: PlaceIndex,
    scoring: Scoring = Scoring(),
) -> Annotation:
    """Rank every candidate by visit score; ties go to the nearer place, then the smaller id."""
    cands = stop.candidates
    if not cands:
        return Annotation(stop)
    radius = max(stop.stop.radius, scoring.radius_floor)
    rel, spatial = spatial_scores(cands, radius, scoring.spatial)

    if scoring.use_temporal:
        if priors is None:
            raise ValueError("temporal scoring needs prior tables")
        m = bin_duration(stop.stop.duration, scoring.scheme)
        k = bin_time(stop.stop.start_time, scoring.tz, scoring.scheme)
        p_d = [lookup_prior(priors.duration, c.category, m, scoring.floor) for c in cands]
        if scoring.joint:
            if priors.joint is None:
                raise ValueError("joint scoring needs the joint prior table")
            p_t = [lookup_joint(priors.joint, c.category, m, k, scoring.floor) for c in cands]
        else:
            p_t = [lookup_prior(priors.time, c.category, k, scoring.floor) for c in cands]
    else:
        p_t = p_d = [1.0] * len(cands)

    if scoring.use_importance:
        imp, nimp = category_importance(cands, index)
    else:
        imp = np.ones(len(cands))
        nimp = np.full(len(cands), 1.0 / len(cands))

    scores = []
    for i, c in enumerate(cands):
        st = p_t[i] * p_d[i] * float(spatial[i])
        scores.append(
            CandidateScore(
                candidate=c,
                relative_spatial=float(rel[i]),
                spatial=float(spatial[i]),
                p_time=float(p_t[i]),
                p_duration=float(p_d[i]),
                spatiotemporal=st,
                importance=float(imp[i]),
                normalized_importance=float(nimp[i]),
                visit_score=st * float(nimp[i]),
            )
        )
    ranked = tuple(sorted(scores, key=CandidateScore.rank_key))
    return Annotation(stop, ranked, Status.ANNOTATED, ranked[0])


def annotate_all(
    stops: Sequence[StopWithCandidates],
    priors: PriorTables | None,
    index: PlaceIndex,
    scoring: Scoring = Scoring(),
    pool=None,
) -> list[Annotation]:
    """Annotate stops independently; output order follows input order."""
    mapper = pool.map if pool is not None else map
    return list(mapper(lambda s: annotate_stop(s, priors, index, scoring), stops))


ANNOTATION_COLUMNS = (
    "stop_id", "user_id", "lat", "lon", "radius", "start_time", "duration", "source",
    "status", "place_id", "category", "spatial", "p_time", "p_duration", "normalized_importance", "visit_score",
)
CANDIDATE_COLUMNS = (
    "stop_id", "rank", "place_id", "category", "distance", "relative_spatial", "spatial",
    "p_time", "p_duration", "spatiotemporal", "normalized_importance", "visit_score",
)


def format_annotations(annotations: Sequence[Annotation]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_COLUMNS)
    for a in annotations:
        s = a.stop.stop
        head = [s.stop_id, s.user_id, fmt(s.center.lat), fmt(s.center.lon), fmt(s.radius),
                iso_utc(s.start_time), fmt(s.duration), s.source.value, a.status.value]
        c = a.chosen
        if c is None:
            w.writerow(head + [""] * 7)
        else:
            w.writerow(head + [c.place_id, c.category.value, fmt(c.spatial), fmt(c.p_time),
                               fmt(c.p_duration), fmt(c.normalized_importance), fmt(c.visit_score)])
    return buf.getvalue()


def format_candidate_scores(annotations: Sequence[Annotation]) -> str:
    """Verbose export: the full ranked candidate list of every stop."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANDIDATE_COLUMNS)
    for a in annotations:
        for rank, c in enumerate(a.ranked):
            w.writerow([a.stop.stop.stop_id, rank, c.place_id, c.category.value, fmt(c.candidate.distance),
                        fmt(c.relative_spatial), fmt(c.spatial), fmt(c.p_time), fmt(c.p_duration),
                        fmt(c.spatiotemporal), fmt(c.normalized_importance), fmt(c.visit_score)])
    return buf.getvalue()


def write_annotations(annotations: Sequence[Annotation], path, verbose_path=None) -> None:
    atomic_write_text(path, format_annotations(annotations))
    if verbose_path is not None:
        atomic_write_text(verbose_path, format_candidate_scores(annotations))


@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    """An annotation read back from its export: enough to evaluate, no scores."""

    stop: StopWithCandidates
    status: Status
    place_id: str | None
    chosen_category: PlaceCategory | None


def read_annotations(path) -> list[AnnotationRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ANNOTATION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaMismatch(f"{path}: missing column(s) {missing}")
        for row in reader:
            stop = Stop(
                stop_id=row["stop_id"],
                user_id=row["user_id"],
                center=GeoPoint(float(row["lat"]), float(row["lon"])),
                radius=float(row["radius"]),
                start_time=parse_iso_utc(row["start_time"]),
                duration=float(row["duration"]),
                source=StopSource(row["source"]),
                member_count=0,
            )
            status = Status(row["status"])
            cat = PlaceCategory.parse(row["category"]) if row["category"] else None
            out.append(AnnotationRecord(StopWithCandidates(stop), status, row["place_id"] or None, cat))
    return out
