"""Exception hierarchy shared by every module of the engine."""


class DlttaError(Exception):
    """Base class for all engine errors."""


class DimensionError(DlttaError, ValueError):
    """Array extents do not line up."""


class DomainError(DlttaError, ValueError):
    """A value lies outside the domain an operation accepts."""


class StateError(DlttaError, RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class FormatError(DlttaError, ValueError):
    """A serialized file is corrupt, truncated or otherwise unreadable."""


class VersionError(FormatError):
    """A serialized file was written by an unsupported format version."""


class ConfigError(DlttaError, ValueError):
    """Invalid, unknown or missing configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class EndOfStream(DlttaError):
    """Raised by a stream that has no batches left."""
