"""Exception hierarchy shared across the package.

The command-line front end maps these onto exit codes: usage-style errors
(including any ``ValueError``) exit 1, data errors exit 2, numeric errors
exit 3.
"""

from __future__ import annotations


class LoopfitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LoopfitError, ValueError):
    """An architecture shape or training recipe violates its invariants."""


class UsageError(LoopfitError, ValueError):
    """An operation was called with inputs that cannot satisfy its preconditions,
    e.g. too few runs to identify the law, or an empty budget split."""


class DataError(LoopfitError):
    """A run file failed to parse or its records violate their invariants.
    Messages name the offending row and field where applicable."""


class NumericError(LoopfitError):
    """An optimization or numeric procedure failed (non-finite objective,
    bracket failure, every restart diverged)."""
