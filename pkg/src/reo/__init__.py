"""Calibration-free camera/LiDAR semantic occupancy prediction on numpy."""
from .tensor import Tensor, no_grad, precision

__all__ = ["Tensor", "no_grad", "precision"]

__version__ = "0.1.0"
