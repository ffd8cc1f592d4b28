"""Multi-task CNN with dynamic loss weighting and pose-directed heads, in numpy."""

from .data import FactorSpec, generate_splits
from .network import MultiTaskNet, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__all__ = ["FactorSpec", "generate_splits", "MultiTaskNet", "load_checkpoint",
           "save_checkpoint", "TrainConfig", "train"]
__version__ = "0.1.0"
