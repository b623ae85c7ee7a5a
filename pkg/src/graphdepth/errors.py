"""Exception hierarchy shared by every graphdepth module."""


class GraphDepthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GraphDepthError, ValueError):
    """Shapes, extents or configuration values are inconsistent."""


class UsageError(GraphDepthError, ValueError):
    """An API was called in a way its contract forbids."""


class NumericError(GraphDepthError, ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""

    def __init__(self, message, op=None, tensor_id=None):
        super().__init__(message)
        self.op = op
        self.tensor_id = tensor_id


class FormatError(GraphDepthError, ValueError):
    """A file could not be parsed; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
