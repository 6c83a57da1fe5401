class PatchDepthError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PatchDepthError, ValueError):
    """Invalid shapes, parameters, or settings."""


class NumericalError(PatchDepthError, RuntimeError):
    """Non-finite values or numerically invalid inputs."""


class DataIOError(PatchDepthError, OSError):
    """Unreadable, missing, or malformed files."""
