"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Array dimensions are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class RangeError(ValueError):
    """A scalar argument is outside its allowed range."""


class ConfigError(ValueError):
    """An invalid configuration value or combination."""


class FormatError(ValueError):
    """A malformed serialized file.

    ``offset`` is the byte position of the first invalid or missing byte.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IoError(OSError):
    """An unreadable or unwritable data file."""
