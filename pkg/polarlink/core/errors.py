"""Exception hierarchy for polarlink."""


class PolarlinkError(Exception):
    """Base class for all polarlink errors."""


class ConfigError(PolarlinkError, ValueError):
    """A configuration value is missing, malformed or out of range."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class TagFileError(PolarlinkError):
    """A time-tag file is malformed, truncated or cannot be written."""


class NoPeakFoundError(PolarlinkError):
    """A correlation histogram has no peak to fit."""


class UndefinedVisibilityError(PolarlinkError):
    """Visibility requested from records that hold no coincidences."""


class CalibrationError(PolarlinkError):
    """Rate targets cannot be reached with the given link parameters."""


class ScheduleMismatchError(PolarlinkError):
    """A measurement schedule does not match the tag files it describes."""
