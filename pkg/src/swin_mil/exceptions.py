"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes or image sizes violate an operation's contract."""


class DomainError(ValueError):
    """A value lies outside an operation's mathematical domain."""


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class GraphError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, replayed graph, ...)."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


class FormatError(ValueError):
    """A binary or text file could not be parsed.

    ``offset`` is the byte offset (or line number for text formats) where
    parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
