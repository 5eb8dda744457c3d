"""Recurrent residual attention U-Net with Tversky-family losses on a
small NumPy reverse-mode autodiff core."""

from .tensor import Tensor, ConvSpec, ShapeError, grad_check
from .model import ModelConfig, R2AUNet, build, predict_mask
from .losses import LossConfig
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ConvSpec", "ShapeError", "grad_check",
    "ModelConfig", "R2AUNet", "build", "predict_mask",
    "LossConfig", "TrainConfig", "train",
    "__version__",
]
