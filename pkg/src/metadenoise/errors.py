"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A numeric argument lies outside its valid range."""


class ImageFormatError(ValueError):
    """A file exists but cannot be decoded as an image."""


class ConfigError(ValueError):
    """Invalid experiment configuration or unreadable corpus."""


class ArtifactError(RuntimeError):
    """A checkpoint or other on-disk artifact is missing or corrupt."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite outer loss.

    ``state`` holds the last well-formed training state so callers can dump
    a diagnostic checkpoint.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
