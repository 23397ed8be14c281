"""Toy semi-supervised segmentation harness."""

from .config import TrainConfig
from .train import RunResult, train

__all__ = ["TrainConfig", "RunResult", "train"]
