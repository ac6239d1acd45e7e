"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
DataError exits 2, NumericalError exits 3.
"""


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class StateError(RuntimeError):
    """An operation was issued against an object in the wrong state."""


class DataError(ValueError):
    """Input files or manifests are malformed or inconsistent."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


def require_shape(cond: bool, message: str) -> None:
    if not cond:
        raise DimensionError(message)
