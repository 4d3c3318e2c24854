"""Context-aware classifier for semantic segmentation, on a numpy tape."""

from .data import Dataset, SceneSpec, generate, read_dataset, write_dataset
from .head import HeadConfig
from .losses import LossConfig
from .train import Checkpoint, RunConfig, evaluate, train

__all__ = [
    "Checkpoint",
    "Dataset",
    "HeadConfig",
    "LossConfig",
    "RunConfig",
    "SceneSpec",
    "evaluate",
    "generate",
    "read_dataset",
    "train",
    "write_dataset",
]
__version__ = "0.1.0"
