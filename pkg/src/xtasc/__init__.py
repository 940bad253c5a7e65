"""Cross-task consistency learning for two-task segmentation + depth models."""

from .tensor import Tensor, backward, detach, grad, no_grad, precision

__all__ = ["Tensor", "backward", "detach", "grad", "no_grad", "precision"]
__version__ = "0.1.0"
