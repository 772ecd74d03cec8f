"""Learned byte-level tokenization trained with a score-function estimator."""
from .model import ARUNet, ModelConfig
from .tensor import Tensor

__all__ = ["ARUNet", "ModelConfig", "Tensor"]
__version__ = "0.1.0"
