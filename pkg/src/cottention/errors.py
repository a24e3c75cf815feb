"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with each other or with a config."""


class DomainError(ValueError):
    """A scalar argument is outside its valid range."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid dimensions or hyperparameters."""


class UsageError(RuntimeError):
    """An API was called out of order, e.g. with a stale forward cache."""


class FitError(ValueError):
    """Not enough valid measurements to fit a scaling exponent."""
