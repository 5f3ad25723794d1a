"""Hyperspectral smoke segmentation with band-isolated encoders and prototype routing."""

from . import kernels
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "kernels", "__version__"]
