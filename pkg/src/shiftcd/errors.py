"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ShiftCDError(Exception):
    exit_code = 1


class ConfigError(ShiftCDError):
    """Invalid configuration or usage (bad field, missing path, bad parameter)."""

    exit_code = 2


class DimensionError(ShiftCDError, ValueError):
    exit_code = 2


class DataIOError(ShiftCDError, OSError):
    exit_code = 3


class FormatError(DataIOError):
    pass


class NumericError(ShiftCDError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError):
    """Input carries no usable signal (constant map, empty class)."""


class ClassifierError(NumericError):
    pass


class ConsistencyError(ShiftCDError):
    exit_code = 4


class CompatibilityError(ShiftCDError):
    exit_code = 5
