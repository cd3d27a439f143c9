"""Shared exception types."""


class ValidationError(ValueError):
    """Raised when an input file or argument violates its schema or contract."""
