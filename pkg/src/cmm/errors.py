"""Exception types shared across the package."""


class CMMError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(CMMError, ValueError):
    """Shapes, dimensions or configuration values do not fit together."""


class UsageError(CMMError, RuntimeError):
    """An object was used out of order, e.g. a gradient tape consumed twice."""


class ParseError(CMMError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(CMMError, ValueError):
    """Market data violates an invariant (ordering, cadence, book shape)."""

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class DivergenceError(CMMError, FloatingPointError):
    """Training produced a non-finite loss."""


class DependencyError(CMMError, RuntimeError):
    """A pipeline stage ran before the stage producing its inputs."""

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer
