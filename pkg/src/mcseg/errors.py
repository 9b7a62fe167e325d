"""Exception hierarchy. Each family maps to one CLI exit code."""


class MCSegError(Exception):
    exit_code = 1


class ShapeError(MCSegError, ValueError):
    """Input tensor/array shapes or values rejected by an operation."""


class ConfigError(MCSegError, ValueError):
    """Invalid configuration; ``field`` names the offending entry when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataError(MCSegError):
    exit_code = 2


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(MCSegError, ArithmeticError):
    exit_code = 3
