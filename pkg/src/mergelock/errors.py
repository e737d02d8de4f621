"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line layer
can translate any library failure without a lookup table.
"""


class MergeLockError(Exception):
    """Base class for all library errors."""

    exit_code = 3

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ParameterError(MergeLockError, ValueError):
    exit_code = 1


class ShapeError(MergeLockError, ValueError):
    exit_code = 2


class SchemaError(MergeLockError, ValueError):
    exit_code = 2


class ParseError(MergeLockError, ValueError):
    """Malformed container bytes; ``offset`` points at the failing byte."""

    exit_code = 2

    def __init__(self, message, offset, **context):
        super().__init__(message, offset=offset, **context)
        self.offset = offset


class KeyMismatchError(MergeLockError):
    """Key does not fit the checkpoint it is applied to."""

    exit_code = 2


class CorruptedKeyError(KeyMismatchError):
    pass


class NumericError(MergeLockError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericError):
    def __init__(self, message, iterations, **context):
        super().__init__(message, iterations=iterations, **context)
        self.iterations = iterations


class SingularMatrixError(NumericError):
    def __init__(self, message, pivot, **context):
        super().__init__(message, pivot=pivot, **context)
        self.pivot = pivot


class SamplingError(NumericError):
    def __init__(self, message, condition, **context):
        super().__init__(message, condition=condition, **context)
        self.condition = condition


class FingerprintWarning(UserWarning):
    """A key was produced for a different checkpoint than the one given."""
