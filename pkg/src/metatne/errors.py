"""Exception hierarchy shared across the package."""


class MetaTNEError(Exception):
    """Base class for every error raised by metatne."""


class ParseError(MetaTNEError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyGraphError(MetaTNEError, ValueError):
    pass


class NodeRangeError(MetaTNEError, IndexError):
    pass


class SplitError(MetaTNEError, ValueError):
    pass


class SamplingError(MetaTNEError, ValueError):
    pass


class NoEligibleLabelError(SamplingError):
    pass


class NumericalError(MetaTNEError, FloatingPointError):
    pass


class ConfigError(MetaTNEError, ValueError):
    pass


class UsageError(MetaTNEError, RuntimeError):
    pass


class UndefinedMetricError(MetaTNEError, ValueError):
    pass


class EvaluationError(MetaTNEError, RuntimeError):
    pass


class CheckpointError(MetaTNEError, ValueError):
    pass
