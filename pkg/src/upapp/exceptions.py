"""Exception hierarchy shared by every stage of the pipeline."""


class UpappError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class GeometryError(UpappError):
    pass


class PointTooFar(GeometryError):
    pass


class DegenerateAngle(GeometryError):
    pass


class InvalidGeometry(GeometryError):
    pass


class NotPolygon(GeometryError):
    pass


class NotPoint(GeometryError):
    pass


# ingest
class SchemaMismatch(UpappError):
    pass


class EmptyInput(UpappError):
    pass


class GeometryParseError(UpappError):
    pass


class EmptyIndex(UpappError):
    pass


# scoring / priors
class InvalidPr(UpappError):
    pass


class AllZero(UpappError):
    pass


class NonPositiveDuration(UpappError):
    pass


class EmptyCandidates(UpappError):
    pass


class NoStops(UpappError):
    pass


class EmptySequence(UpappError):
    pass


# evaluation
class NoLogs(UpappError):
    pass


class EmptyPairs(UpappError):
    pass


class ConfigError(UpappError):
    pass


class NoTransitions(UserWarning):
    """No adjacent stop pair was available; transitions fall back to uniform rows."""
