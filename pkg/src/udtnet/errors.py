"""Exception hierarchy shared by all modules."""


class UdtError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(UdtError, ValueError):
    """Input does not satisfy a type invariant or schema."""


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParameterError(UdtError, ValueError):
    """An operation argument is out of its allowed range."""


class StateError(UdtError, RuntimeError):
    """Operation is not valid in the current object state."""


class GeometryError(UdtError, ValueError):
    pass


class SchemaError(ValidationError):
    pass


class RankError(UdtError, ValueError):
    """Regression design matrix is rank deficient."""


class CapacityError(UdtError, ValueError):
    """Request exceeds a hard capacity limit or budget."""
