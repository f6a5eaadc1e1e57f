from .numerics import DimensionError, NumericalError


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class MissingInputError(FileNotFoundError):
    """A pipeline stage's upstream output is absent."""


__all__ = ["ConfigError", "DimensionError", "MissingInputError", "NumericalError"]
