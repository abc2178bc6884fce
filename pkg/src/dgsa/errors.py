"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DgsaError(Exception):
    exit_code = 1


class UsageError(DgsaError):
    exit_code = 1


class ConfigError(DgsaError, ValueError):
    exit_code = 1


class DimensionError(DgsaError, ValueError):
    exit_code = 1


class DataError(DgsaError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """Malformed binary or text input. ``offset`` is the byte offset, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DgsaError, ArithmeticError):
    exit_code = 3
