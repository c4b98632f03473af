"""Exception hierarchy shared across the package."""


class MoeLoraError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MoeLoraError, ValueError):
    """Invalid configuration or violated construction precondition."""


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class ContractError(ConfigError):
    """An argument violates an operation contract (e.g. unnormalized weights)."""


class InvalidObjectiveError(ConfigError):
    """The loss has no positions to average over."""


class NonMergeableError(ConfigError):
    """Per-task weights cannot be recovered for this model."""


class NumericError(MoeLoraError, ArithmeticError):
    """A non-finite value appeared during computation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DatasetError(MoeLoraError, ValueError):
    """Malformed or unusable dataset."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownTaskError(MoeLoraError, KeyError):
    """Task id not present in the task table."""
