"""Exception hierarchy shared by every module."""


class AnoMemError(Exception):
    """Base class for all package errors."""


class ValidationError(AnoMemError, ValueError):
    """Invalid argument, label, configuration value or protocol request."""


class DimensionError(ValidationError):
    """Shape or axis mismatch between operands."""


class NumericError(AnoMemError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(AnoMemError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class FormatError(AnoMemError):
    """Malformed binary input (dataset record or checkpoint container)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
