"""Exception types shared across the package.

Each family maps onto a CLI exit code (see ``mcrvqgan.cli``).
"""


class MCRError(Exception):
    """Base class for all package errors."""


class ConfigError(MCRError, ValueError):
    """Invalid or unknown configuration value."""


class ShapeError(MCRError, ValueError):
    """Tensor or image dimensions violate an operation's contract."""


class RangeError(MCRError, ValueError):
    """A scalar argument lies outside its admissible range."""


class DataError(MCRError):
    """Input data is missing, empty or inconsistent."""


class FormatError(DataError):
    """A file could not be decoded."""


class MetadataError(DataError):
    """Required subject metadata (e.g. diagnosis) is missing."""


class BackendError(MCRError, RuntimeError):
    """A requested backend (e.g. pretrained weights) is unavailable."""


class CapabilityError(MCRError, RuntimeError):
    """The given callable cannot provide the required gradients."""


class DivergenceError(MCRError, RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(MCRError):
    """Checkpoint has a bad header, unknown version or mismatched config hash."""
