"""Exception types raised across the pipeline."""


class FeatSenseError(Exception):
    pass


class MalformedFile(FeatSenseError):
    pass


class DimensionMismatch(FeatSenseError):
    pass


class EmptyCloud(FeatSenseError):
    pass


class MalformedLine(FeatSenseError):
    pass


class NonMonotonicTimestamps(FeatSenseError):
    pass


class BadKernel(FeatSenseError):
    pass


class MapEmpty(FeatSenseError):
    pass


class Degenerate(FeatSenseError):
    """Registration problem is under-constrained; caller should fall back."""


class TooFewPoints(FeatSenseError):
    pass


class GeometryMismatch(FeatSenseError):
    pass


class StoreIo(FeatSenseError):
    pass


class DegenerateDirection(FeatSenseError):
    pass


class DegenerateGeometry(FeatSenseError):
    pass


class NoOverlap(FeatSenseError):
    pass


class ConfigError(FeatSenseError):
    pass
