"""Exception hierarchy; the CLI maps each class to an exit code."""


class LatrotError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(LatrotError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class DataError(LatrotError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericalError(LatrotError, ArithmeticError):
    """An optimisation or decomposition failed numerically."""

    exit_code = 4
