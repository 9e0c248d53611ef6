"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so every error raised by the
library should be one of the classes below (or a subclass).
"""


class ShapeBridgeError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class UsageError(ShapeBridgeError):
    """Bad arguments, bad config keys, misuse of an API."""

    exit_code = 1


class DataError(ShapeBridgeError):
    """Malformed or inconsistent input data (files, meshes, grids)."""

    exit_code = 2


class GeometryMismatchError(DataError):
    """Operands do not share dims/spacing/origin."""


class NumericError(ShapeBridgeError):
    """Non-finite values or numerically impossible requests."""

    exit_code = 3
