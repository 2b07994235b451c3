"""Exception types shared across the package."""


class CocaLabError(Exception):
    """Base class for every error raised by coca_lab."""


class ConfigError(CocaLabError, ValueError):
    """Invalid configuration value or combination."""


class InputError(CocaLabError, ValueError):
    """Bad argument passed to an operation (wrong length, out-of-range id, ...)."""


class RangeError(CocaLabError, IndexError):
    """A position or length exceeds what a table or cache can hold."""


class DimensionError(CocaLabError, ValueError):
    """Tensor shapes do not line up."""


class StateError(CocaLabError, RuntimeError):
    """Inconsistent runtime state, e.g. a cache that does not match the model."""


class NumericError(CocaLabError, ArithmeticError):
    """Non-finite values where finite ones are required."""
