"""
Error categories for collabdet.

All errors raised on purpose by the library derive from CollabDetError. Input and
configuration errors also derive from ValueError, so callers that only expect
ValueError for bad arguments keep working.
"""


class CollabDetError(Exception):
    """Base class for every error raised by collabdet."""

    category = "error"


class InvalidInputError(CollabDetError, ValueError):
    """Raised for malformed inputs: degenerate boxes, shape mismatches, bad labels."""

    category = "invalid-input"


class EmptyProposalError(InvalidInputError):
    """Raised when a detector is asked to score an empty set of regions."""

    category = "empty-proposal"


class ConfigurationError(CollabDetError, ValueError):
    """Raised for bad config values, missing or mismatched checkpoints and datasets."""

    category = "configuration"
