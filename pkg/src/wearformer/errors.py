"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: ValidationError -> 2,
NumericError -> 3, LeakageError -> 4.
"""


class WearformerError(Exception):
    """Base class for all package errors."""


class ValidationError(WearformerError):
    """Bad configuration, malformed input, or violated preconditions."""


class DataFormatError(ValidationError):
    """Malformed dataset file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValidationError):
    """Tensor shape mismatch."""


class NumericError(WearformerError):
    """Non-finite values encountered during computation."""


class LeakageError(WearformerError):
    """A window or example crossed a temporal split boundary it must not."""


class UndefinedMetricError(WearformerError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class CheckpointError(WearformerError):
    """Unreadable, version-mismatched, or shape-incompatible checkpoint."""


class TapeConsumedError(WearformerError):
    """backward() was called twice on the same tape."""
