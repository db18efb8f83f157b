"""
Error types raised by the pipeline.

I/O problems are left to the built-in OSError family so callers can tell an
unreadable file apart from data that was read but is invalid.
"""


class DiscGradeError(Exception):
    """Base class for every pipeline error."""


class ConfigError(DiscGradeError):
    """Invalid or inconsistent configuration."""


class StageMismatchError(ConfigError):
    """A checkpoint was produced by a different stage or preset than required."""


class DataError(DiscGradeError):
    """Malformed input data (labels, shapes, empty sets)."""


class InconsistencyError(DataError):
    """Two artifacts disagree, e.g. a split names a disc the manifest lacks."""


class ManifestValidationError(DataError):
    """A manifest failed validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        shown = "; ".join(self.violations[:5])
        super().__init__(f"{len(self.violations)} manifest violation(s): {shown}")


class GeometryError(DataError):
    """A crop window falls outside the image."""


class NumericError(DiscGradeError):
    """Degenerate numeric input such as a zero-norm embedding."""


class UndefinedLossError(NumericError):
    """The loss has no valid term for the given batch."""
