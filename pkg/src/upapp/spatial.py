"""Relative spatial probability of candidate places and its normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geo
from .exceptions import AllZero, InvalidPr, NotPoint, NotPolygon
from .geo import Circle, Topology


@dataclass(frozen=True)
class SpatialParams:
    p_r: float = 0.5
    search_radius: float = 200.0

    def __post_init__(self):
        if not 0.0 < self.p_r < 1.0:
            raise InvalidPr(f"p_r must lie in (0, 1), got {self.p_r}")
        if not self.search_radius > 0:
            raise ValueError("search_radius must be positive")


def roi_branch(topology: Topology, overlap: float, distance: float, stop_radius: float, params: SpatialParams) -> float:
    """Topology-based score given precomputed overlap share and distance."""
    p_r = params.p_r
    if topology is Topology.CONTAIN:
        return 1.0
    if topology is Topology.INTERSECT:
        return p_r + (1.0 - p_r) * min(max(overlap, 0.0), 1.0)
    span = params.search_radius - stop_radius
    if span <= 0:
        return 0.0
    return min(max(p_r * (params.search_radius - distance) / span, 0.0), p_r)


def relative_prob_roi(stop: Circle, roi: geo.PlaceGeometry, params: SpatialParams) -> float:
    """Relative probability of a region: 1 when nested, boosted by overlap
    when intersecting, and decaying linearly with distance when apart."""
    if isinstance(roi, geo.Point):
        raise NotPolygon("ROI scoring needs a polygon")
    if roi.area <= 0:
        return relative_prob_poi_at(geo.min_distance(roi, stop.center), stop.radius, params.p_r)
    topo = geo.classify_topology(stop, roi)
    overlap = geo.intersection_area(stop, roi) / stop.area if topo is Topology.INTERSECT else 0.0
    return roi_branch(topo, overlap, geo.min_distance(roi, stop.center), stop.radius, params)


def gaussian_sigma(stop_radius: float, p_r: float) -> float:
    """Spread that puts the Gaussian at exactly ``p_r`` on the stop boundary."""
    if not 0.0 < p_r < 1.0:
        raise InvalidPr(f"p_r must lie in (0, 1), got {p_r}")
    if not stop_radius > 0:
        raise ValueError("stop radius must be positive (apply the floor first)")
    return stop_radius / math.sqrt(-2.0 * math.log(p_r))


def relative_prob_poi_at(distance: float, stop_radius: float, p_r: float) -> float:
    # exp(-d^2 / 2 sigma^2) == p_r ** ((d / r)^2)
    if distance == 0:
        return 1.0
    sigma = gaussian_sigma(stop_radius, p_r)
    return math.exp(-(distance**2) / (2.0 * sigma**2))


def relative_prob_poi(stop: Circle, poi: geo.PlaceGeometry, params: SpatialParams) -> float:
    if not isinstance(poi, geo.Point):
        raise NotPoint("POI scoring needs a point geometry")
    d = math.hypot(poi.point.x - stop.center.x, poi.point.y - stop.center.y)
    return relative_prob_poi_at(d, stop.radius, params.p_r)


def normalize_spatial(relatives: Sequence[float]) -> np.ndarray:
    r = np.asarray(relatives, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("relative probabilities must be finite and non-negative")
    total = r.sum()
    if total <= 0:
        raise AllZero("every relative spatial probability is zero")
    return r / total


def candidate_relative(candidate, stop_radius: float, params: SpatialParams) -> float:
    """Relative probability for a CandidatePlace with cached topology/overlap.

    ``stop_radius`` should already carry the GPS-accuracy floor.
    """
    if not candidate.place.is_roi or candidate.place.degenerate:
        return relative_prob_poi_at(candidate.distance, stop_radius, params.p_r)
    return roi_branch(candidate.topology, candidate.overlap or 0.0, candidate.distance, stop_radius, params)


def spatial_scores(candidates: Sequence, stop_radius: float, params: SpatialParams) -> tuple[np.ndarray, np.ndarray]:
    """``(relative, normalized)`` arrays; an all-zero set falls back to uniform."""
    rel = np.array([candidate_relative(c, stop_radius, params) for c in candidates], dtype=float)
    try:
        norm = normalize_spatial(rel)
    except AllZero:
        norm = np.full(len(rel), 1.0 / len(rel))
    return rel, norm
