"""
Exception types shared across spec_compare.

The CLI maps them onto exit codes:
    ValidationError           -> 2
    NumericalError (+ subs)   -> 3
    AlignDivergenceError      -> 4
StageError wraps any of them with the pipeline stage that failed.
"""


class SpecError(Exception):
    """Base class for every error raised by spec_compare."""


class ValidationError(SpecError, ValueError):
    """Bad input data, file or configuration."""


class NumericalError(SpecError, RuntimeError):
    """A solver failed or produced an answer we refuse to trust."""


class PowerIterationError(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateEigenvalueError(NumericalError):
    """Top |eigenvalue| of Gamma is not unique, so the gradient is undefined."""


class AlignDivergenceError(SpecError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StageError(SpecError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
