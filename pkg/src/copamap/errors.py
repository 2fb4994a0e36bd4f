"""Exception hierarchy shared by all copamap modules."""


class CopaMapError(Exception):
    """Base class for all package errors."""


class DataError(CopaMapError, ValueError):
    """Input data is malformed or violates a precondition."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateDataError(DataError):
    """Data is well-formed but carries no usable signal (e.g. constant targets)."""


class NumericalError(CopaMapError, ArithmeticError):
    """A numerical routine failed (non-finite loss, failed Cholesky, ...)."""


class NoPathError(CopaMapError):
    """The planner could not connect start and goal."""


class ModelFileError(CopaMapError):
    """A model file is corrupt, truncated, of an unknown version or the wrong kind."""
