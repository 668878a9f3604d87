"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class RtgBoostError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(RtgBoostError, ValueError):
    """Array shapes or dimensions do not line up."""


class ValidationError(RtgBoostError, ValueError):
    """Values are present but unacceptable (non-finite, out of range, ...)."""


class DegenerateRangeError(ValidationError):
    """A normalization range has zero (or negative) width."""


class UsageError(RtgBoostError, RuntimeError):
    """An object was used in a state that does not allow the call."""


class ModelLoadError(RtgBoostError, ValueError):
    """A serialized model document could not be loaded."""


class VersionError(ModelLoadError):
    """The document carries a version tag this build does not understand."""


class MalformedDocumentError(ModelLoadError):
    """The document is truncated, not JSON, or missing required fields."""


class FeatureCountError(ModelLoadError):
    """The document's declared feature count disagrees with its trees or caller."""


class OutputError(RtgBoostError, OSError):
    """A result file could not be written."""
