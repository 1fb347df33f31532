from pathlib import Path
from typing import Optional, Union

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class SocialDiffError(Exception):
    """Base class for all errors raised by the estimation service."""

    exit_code = EXIT_USAGE


class ConfigError(SocialDiffError):
    """Bad configuration or command line usage."""

    exit_code = EXIT_USAGE


class DataValidationError(SocialDiffError):
    """Input data failed validation; carries file, line and column context."""

    exit_code = EXIT_DATA

    def __init__(
        self,
        message: str,
        file: Optional[Union[str, Path]] = None,
        line: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.message = message
        self.file = str(file) if file is not None else None
        self.line = line
        self.column = column
        super().__init__(str(self))

    def __str__(self) -> str:
        where = []
        if self.file:
            where.append(self.file)
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.column:
            where.append(f"column '{self.column}'")
        prefix = ", ".join(where)
        return f"{prefix}: {self.message}" if prefix else self.message


class DegenerateInputError(DataValidationError):
    """Input data cannot support the requested computation (constant or collinear columns)."""


class NumericalError(SocialDiffError):
    """A numerical routine failed."""

    exit_code = EXIT_NUMERICAL


class InvalidTuningError(NumericalError):
    """Unscented transform scaling parameters are unusable."""


class DegenerateCovarianceError(NumericalError):
    """A covariance matrix could not be factorised even after jitter."""


class SingularInnovationError(NumericalError):
    """The innovation covariance of a filter step is not invertible."""


class InvalidCovarianceError(NumericalError):
    """A covariance matrix supplied to a model is not symmetric PSD."""


class FilterStepError(NumericalError):
    """A filter step failed; carries the time index of the failing step."""

    def __init__(self, time_index: int, cause: Exception):
        self.time_index = time_index
        self.cause = cause
        super().__init__(f"filter step {time_index} failed: {cause}")


class InitializationError(NumericalError):
    """An optimizer could not evaluate any member of its initial population."""
