"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class IgnoreAttnError(Exception):
    exit_code = 1


class ConfigError(IgnoreAttnError, ValueError):
    exit_code = 2


class DataError(IgnoreAttnError, ValueError):
    exit_code = 3


class NumericError(IgnoreAttnError, ArithmeticError):
    exit_code = 4


class CheckpointError(IgnoreAttnError, ValueError):
    exit_code = 5
