"""Exception types shared across the package."""

from .numerics import DomainError

__all__ = ["DomainError", "ConfigurationError", "DataError", "TrainingError"]


class ConfigurationError(ValueError):
    """Invalid architecture or hyperparameter combination."""


class DataError(ValueError):
    """Malformed, non-finite or dimensionally incompatible input data."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""
