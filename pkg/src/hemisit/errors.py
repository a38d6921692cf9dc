"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand extents do not line up."""


class InputError(ValueError):
    """An argument is outside the operation's domain."""


class ConfigurationError(ValueError):
    """A model or run configuration is invalid."""


class SpecError(ValueError):
    """A synthetic-data or dataset specification cannot be satisfied."""


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""
