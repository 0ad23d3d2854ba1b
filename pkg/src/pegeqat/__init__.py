"""Quantization-aware training with progressive element-wise gradient estimation."""

from .kernels import BACKEND
from .tensor import Tensor, backward, finite_diff_grad, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "backward", "finite_diff_grad", "no_grad", "__version__"]
