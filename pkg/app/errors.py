"""
Base exception types shared across the package.
"""


class BnerError(Exception):
    """Base class for every error raised by the library."""
    pass


class DataError(BnerError):
    """Input data violates a domain-type invariant (shapes, ids, counts)."""
    pass
