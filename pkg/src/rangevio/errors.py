"""Exception types raised across the package."""


class RangeVioError(Exception):
    """Base class for package errors."""


class FeatureAtInfinityError(RangeVioError):
    """Inverse depth too close to zero to form a Cartesian point."""


class BehindCameraError(RangeVioError):
    """Projection requested for a point at or behind the image plane."""


class StreamGapError(RangeVioError):
    """IMU stream step exceeds the supported integration interval."""


class NonMonotonicStampError(RangeVioError):
    """A sample or clone stamp does not advance time."""


class DegenerateGeometryError(RangeVioError):
    """Triangulation or facet construction impossible for this input."""


class DivergenceError(RangeVioError):
    """Filter state or covariance became non-finite."""


class ConfigError(RangeVioError):
    """Scenario configuration failed validation."""
