"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit code so `cubevit.cli` can translate any
failure into the documented process status.
"""


class CubevitError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(CubevitError):
    """Caller violated a precondition (bad shape, axis, ratio, flag)."""

    exit_code = 2


class DegenerateInputError(CubevitError):
    """Input is structurally valid but statistically degenerate
    (zero vector, constant covariate, single-class labels)."""

    exit_code = 3


class FormatError(CubevitError):
    """A file does not match its declared binary or JSON layout."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(CubevitError):
    """A computation produced NaN/Inf or diverged."""

    exit_code = 4
