class RtchmcError(Exception):
    """Base class for all errors raised by rtchmc."""


class DimensionMismatchError(RtchmcError, ValueError):
    pass


class OffManifoldError(RtchmcError, ValueError):
    pass


class SingularConstraintError(RtchmcError):
    """The constraint Jacobian lost rank (Gram matrix not invertible)."""


class TargetEvaluationError(RtchmcError):
    """A potential or gradient could not be evaluated at the given point."""


class IntegrationError(RtchmcError):
    """SHAKE failed in a sampler that has no rejection step to absorb it."""


class DegenerateSeriesError(RtchmcError, ValueError):
    pass


class DataFormatError(RtchmcError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ConfigError(RtchmcError, ValueError):
    pass
