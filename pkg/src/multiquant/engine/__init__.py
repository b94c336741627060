"""Minimal float64 reverse-mode autodiff engine."""

from . import ops
from .ops import matmul_precision
from .gradcheck import GradCheckResult, finite_diff_check
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .optim import Adam, SGDMomentum
from .tensor import BackwardError, NonFiniteError, ShapeError, Tensor, no_grad

__all__ = [
    "matmul_precision",
    "Adam",
    "BackwardError",
    "BatchNorm2d",
    "Conv2d",
    "GradCheckResult",
    "Linear",
    "Module",
    "NonFiniteError",
    "SGDMomentum",
    "ShapeError",
    "Tensor",
    "finite_diff_check",
    "no_grad",
    "ops",
]
