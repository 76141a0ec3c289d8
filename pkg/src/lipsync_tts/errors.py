"""Exception hierarchy shared by every module."""


class LipSyncError(Exception):
    """Base class for all package errors."""


class InvalidInput(LipSyncError, ValueError):
    pass


class InvalidLanguage(InvalidInput):
    pass


class InsufficientData(LipSyncError, ValueError):
    pass


class ShapeError(LipSyncError, ValueError):
    pass


class MalformedSequence(LipSyncError, ValueError):
    pass


class EmptyInput(InvalidInput):
    pass


class EmptyAudio(LipSyncError, ValueError):
    pass


class MissingModality(LipSyncError, ValueError):
    pass


class SequenceTooLong(LipSyncError, ValueError):
    pass


class InvalidState(LipSyncError, RuntimeError):
    pass


class InvalidDistribution(LipSyncError, ValueError):
    pass


class InvalidConfig(LipSyncError, ValueError):
    pass


class UnsupportedFormat(LipSyncError, IOError):
    pass


class CorruptDataset(LipSyncError, IOError):
    pass


class CorruptCheckpoint(LipSyncError, IOError):
    pass


class ConfigMismatch(LipSyncError, ValueError):
    pass


class DivergenceError(LipSyncError, RuntimeError):
    """Raised when training produces a non-finite loss.

    ``checkpoint`` holds the last parameters for which the loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(LipSyncError, ValueError):
    """Malformed experiment config; ``field`` is the dotted path at fault."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NotFound(LipSyncError, FileNotFoundError):
    pass
