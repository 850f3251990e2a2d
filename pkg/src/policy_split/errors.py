"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violated a documented precondition or invariant."""


class DomainError(ValueError):
    """A mathematical domain violation, e.g. a KL support mismatch."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ResourceError(RuntimeError):
    """A configured search or compute budget was exceeded."""


class IncompatibleCheckpointError(ValueError):
    """A checkpoint file has an unknown magic string or format version."""
