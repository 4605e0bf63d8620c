"""Exception classes shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (files, manifests, shapes)."""


class CheckpointError(DataError):
    """Corrupt, truncated, or version-incompatible checkpoint bytes."""


class NumericError(Exception):
    """A numerical computation produced non-finite or invalid results."""
