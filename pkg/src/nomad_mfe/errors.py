"""Exception hierarchy shared by the solver modules."""


class MFEError(Exception):
    """Base class for all solver errors."""


class ModelError(MFEError, ValueError):
    """Invalid model input."""


class NonPositiveRate(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class OutOfRange(ModelError):
    pass


class OccupancyZero(ModelError):
    pass


class TruncationTooSmall(ModelError):
    pass


class SingularSystem(MFEError):
    pass


class NoBracket(MFEError):
    """Occupancy is not bracketed by the arrival-rate search interval.

    Usually means the truncation level is too small for the chosen density.
    """


class NonConvergence(MFEError):
    pass


class MonotonicityViolation(MFEError):
    pass


class DegenerateLowerBound(MFEError):
    pass


class NotFound(MFEError):
    """No start produced an accepted equilibrium; ``result`` holds the best point."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InvalidSystem(ModelError):
    pass


class ConfigError(MFEError):
    """Bad run configuration. ``key`` is the dotted path of the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
