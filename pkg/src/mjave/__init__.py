"""Joint multimodal attribute prediction and value extraction (M-JAVE)."""

from .dataio import Instance, ImageFeatures, TagScheme, Vocabulary, generate_synthetic
from .model import AblationConfig, MJAVE, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "AblationConfig",
    "ImageFeatures",
    "Instance",
    "MJAVE",
    "ModelConfig",
    "TagScheme",
    "TrainConfig",
    "Vocabulary",
    "generate_synthetic",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
