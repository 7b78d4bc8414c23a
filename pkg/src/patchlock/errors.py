"""Shared exception base for the package."""


class PatchlockError(Exception):
    """Base class for all errors raised by this package."""
