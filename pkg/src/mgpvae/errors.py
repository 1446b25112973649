"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation failures exit 1, numerical
failures exit 2, I/O failures exit 3.
"""


class MgpVaeError(Exception):
    """Base class for all package errors."""


class ValidationError(MgpVaeError):
    """Bad input: shapes, config values, malformed files, impossible requests."""


class ShapeError(ValidationError):
    """Shape mismatch with a diagnostic of what was expected vs received."""

    def __init__(self, what, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


class NumericalError(MgpVaeError):
    """Non-finite values, failed factorizations, diverged optimization."""
