"""Exception hierarchy shared across the package."""


class MetaFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaFormerError, ValueError):
    """Incompatible tensor shapes."""


class ConfigError(MetaFormerError, ValueError):
    """Invalid configuration value."""


class ContractError(MetaFormerError, RuntimeError):
    """An operation was called outside its contract."""


class GraphError(ContractError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class ValidationError(MetaFormerError, ValueError):
    """Invalid input record; ``field`` names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericError(MetaFormerError, FloatingPointError):
    """Non-finite value encountered during training."""


class CheckpointError(MetaFormerError, IOError):
    """A checkpoint or dataset file could not be read."""
