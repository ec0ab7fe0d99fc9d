"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class MederError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MederError):
    """Invalid data: malformed files, bad labels, violated preconditions."""


class ShapeError(MederError):
    """Tensor shape mismatch; the message names both shapes."""


class NumericError(MederError):
    """Numeric failure: divergence, failed gradient check, bad probabilities."""


class UsageError(MederError):
    """Command-line usage error."""
