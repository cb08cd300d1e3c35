"""Exception types shared across the package."""


class EmofuseError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(EmofuseError):
    """A hyperparameter is outside its legal range (e.g. a temperature <= 0)."""


class InvalidInputError(EmofuseError):
    """An input value violates a precondition (shape, range, non-finite, ...)."""


class ConfigurationError(EmofuseError):
    """A configuration value or combination of values is unusable."""


class ParseError(EmofuseError):
    """A file could not be parsed. Carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(EmofuseError):
    """A parsed record violates the declared schema."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DependencyError(EmofuseError):
    """A required upstream artifact (checkpoint, data file) is missing."""


class DegenerateRepresentationError(EmofuseError):
    """A representation row has zero norm and cannot be L2-normalized."""
