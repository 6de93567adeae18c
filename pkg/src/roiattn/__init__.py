"""RoI external attention, double head and positional encoding on a numpy autograd core."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
