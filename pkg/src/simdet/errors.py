"""Exception hierarchy shared by every simdet module."""


class SimdetError(Exception):
    """Base class for all simdet errors."""


class InvalidInputError(SimdetError, ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(SimdetError, ValueError):
    """Inconsistent shapes, unknown names or bad hyperparameters."""


class StateError(SimdetError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NonFiniteError(SimdetError, FloatingPointError):
    """NaN or Inf appeared in a tensor."""


class FormatError(SimdetError, ValueError):
    """A file does not follow its expected on-disk format."""


class ParseError(FormatError):
    """A text line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
