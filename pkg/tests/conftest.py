import math

import numpy as np
import pytest
from hypothesis import settings

from upapp.geo import GeoPoint
from upapp.ingest import Place, PlaceCategory, PlaceIndex
from upapp.stops import Stop, StopSource, StopWithCandidates, attach_candidates

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ORIGIN = GeoPoint(39.99, 116.33)
M_LAT = 6_371_000.0 * math.pi / 180.0


def offset(east_m, north_m, origin=ORIGIN):
    m_lon = M_LAT * math.cos(math.radians(origin.lat))
    return GeoPoint(origin.lat + north_m / M_LAT, origin.lon + east_m / m_lon)


def poi(place_id, category, east_m=0.0, north_m=0.0):
    return Place(place_id, PlaceCategory(category), point=offset(east_m, north_m))


def roi(place_id, category, corners_m):
    ring = np.array([[p.lon, p.lat] for p in (offset(x, y) for x, y in corners_m)])
    return Place(place_id, PlaceCategory(category), parts=((ring,),))


def make_stop(stop_id="s", east_m=0.0, north_m=0.0, radius=20.0, start=1_709_542_800, duration=3600.0, user="u"):
    # default start is 2024-03-04 09:00 UTC
    return Stop(stop_id, user, offset(east_m, north_m), radius, start, duration, StopSource.CLUSTER, 10)


def stop_with(places, stop=None, index=None):
    stop = stop or make_stop()
    index = index or PlaceIndex(places)
    return attach_candidates(stop, index), index


@pytest.fixture
def origin():
    return ORIGIN
