"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from TracefitError so the
CLI can report a stable, machine-parseable error class.
"""


class TracefitError(Exception):
    """Base class for all package errors."""


class ConfigError(TracefitError):
    """Invalid configuration: missing mandatory column, bad option value."""


class DataError(TracefitError):
    """File-level data problem (empty file, malformed structure)."""


class RowError(DataError):
    """Row-level data problem, annotated with the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class EmptyDatasetError(DataError):
    """A filter stage (or the input itself) left no events."""


class SpecError(TracefitError):
    """Model specification text failed to parse or validate."""


class SequencingError(TracefitError):
    """An event arrived out of timestamp order for its state."""


class FitError(TracefitError):
    """Model fitting could not produce a usable result."""
