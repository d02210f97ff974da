"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: InputError -> 2, InvariantError -> 3,
DegeneracyError -> 4. Library code raises; only the CLI exits.
"""


class MemrankError(Exception):
    """Base class for all toolkit errors."""


class InputError(MemrankError):
    """Missing files, malformed lines, unreadable binary payloads."""


class InvariantError(MemrankError):
    """A domain invariant was violated (duplicate ids, bad labels, shape mismatches)."""


class DegeneracyError(MemrankError):
    """A degeneracy audit failed: a trivial baseline solves the benchmark."""
