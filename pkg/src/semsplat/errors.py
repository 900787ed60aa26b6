"""Exception taxonomy shared across the package.

Three failure categories map onto the CLI exit codes: bad arguments or
malformed configuration (usage), unreadable or inconsistent input data,
and runtime state violations.
"""


class SemsplatError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SemsplatError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(SemsplatError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class BundleFormatError(SemsplatError, RuntimeError):
    """A sequence bundle on disk is missing files or internally inconsistent."""


class UndefinedMetricError(SemsplatError, RuntimeError):
    """A metric has no defined value for the given inputs (e.g. no valid pixels)."""
