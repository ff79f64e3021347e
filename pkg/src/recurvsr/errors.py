"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class RecurVSRError(Exception):
    exit_code = 1


class ConfigError(RecurVSRError, ValueError):
    exit_code = 2


class ShapeError(RecurVSRError, ValueError):
    exit_code = 2


class InputError(RecurVSRError, ValueError):
    exit_code = 2


class DataIOError(RecurVSRError, OSError):
    exit_code = 3


class NumericalError(RecurVSRError, ArithmeticError):
    exit_code = 4
