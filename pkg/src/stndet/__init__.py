"""Spatial-transformer front end for a small single-stage detector, on a numpy autodiff core."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
