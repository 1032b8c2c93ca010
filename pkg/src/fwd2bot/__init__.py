"""Toy double-forward visual token compression."""

from .model import Fwd2BotModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = ["Fwd2BotModel", "ModelConfig", "TrainConfig", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
