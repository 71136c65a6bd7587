"""Exception hierarchy shared by all modules."""


class LabError(Exception):
    """Base class for all errors raised by sharpen_lab."""


class ConfigError(LabError, ValueError):
    """Invalid configuration; ``field`` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InputError(LabError, ValueError):
    pass


class SizeError(LabError):
    """An enumeration would exceed the size guard."""


class DomainError(LabError, ValueError):
    pass


class InternalError(LabError, RuntimeError):
    pass


class TrainingError(LabError, RuntimeError):
    pass
