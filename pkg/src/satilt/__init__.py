"""Attention-augmented MobileNet blocks and multi-label image tilt estimation."""

from .tensor import ShapeError, Tape, Tensor, backward
from .gradcheck import check_gradients

__all__ = ["Tensor", "Tape", "backward", "check_gradients", "ShapeError"]
__version__ = "0.1.0"
