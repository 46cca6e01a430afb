from __future__ import annotations

from pathlib import Path


class DesenseError(Exception):
    """Base exception for desense_kf."""


class DimensionError(DesenseError, ValueError):
    pass


class NumericFailure(DesenseError, ArithmeticError):
    """Raised when a filter produces non-finite values."""

    def __init__(
        self, message: str, *, epoch: int | None = None, time: float | None = None
    ):
        self.epoch = epoch
        self.time = time
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        elif time is not None:
            message = f"t={time:.6g}s: {message}"
        super().__init__(message)


class SingularInnovationError(NumericFailure):
    """Raised when an innovation-like matrix cannot be safely solved against."""

    def __init__(
        self,
        message: str,
        *,
        condition: float,
        epoch: int | None = None,
        time: float | None = None,
    ):
        self.condition = condition
        super().__init__(
            f"{message} (condition estimate {condition:.3e})", epoch=epoch, time=time
        )


class SingularEquationError(SingularInnovationError):
    """Raised when the vectorized gain equation is singular."""


class ConfigError(DesenseError):
    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class ExperimentFailure(DesenseError, RuntimeError):
    def __init__(self, message: str, failed_cases: int = 0):
        self.failed_cases = failed_cases
        super().__init__(message)
