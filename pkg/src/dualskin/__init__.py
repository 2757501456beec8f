"""Joint skin and body segmentation with mutual guidance between two decoders."""

from .estimator import MutualGuidanceSegmenter
from .exceptions import ConfigError, DualSkinError, InputError, TrainingAbort, ValidationError

__version__ = "0.1.0"

__all__ = [
    "MutualGuidanceSegmenter",
    "DualSkinError",
    "ValidationError",
    "InputError",
    "ConfigError",
    "TrainingAbort",
    "__version__",
]
