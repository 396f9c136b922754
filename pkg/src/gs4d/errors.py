"""Exception hierarchy shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (files, shapes, labels)."""


class NumericalError(Exception):
    """Non-finite values or diverged optimization."""
