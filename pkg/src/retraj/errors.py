"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and DataError (and subclasses)
to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Invalid, corrupt, or missing input data."""


class ParseError(DataError):
    """A file could not be parsed; the message names the offending line."""


class IntegrityError(DataError):
    """Parsed data violates a structural constraint (dangling ids, bad checksums)."""


class AlignmentError(DataError):
    """A trajectory timestamp cannot be placed on the target time grid."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or similar)."""
