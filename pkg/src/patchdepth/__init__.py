"""Self-supervised stereo depth trained with a patch-based ZNCC matching loss."""

from .errors import ConfigError, DataIOError, NumericalError, PatchDepthError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataIOError", "NumericalError", "PatchDepthError", "__version__"]
