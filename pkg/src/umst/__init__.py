"""Multiscale Transformer encoder with word-boundary and dependency priors."""

from .model import ModelConfig, Seq2Seq
from .structure import DependencyGraph, ScaleStructure, Segmentation
from .training import TrainConfig

__all__ = ["DependencyGraph", "ModelConfig", "ScaleStructure", "Segmentation", "Seq2Seq",
           "TrainConfig"]
__version__ = "0.1.0"
