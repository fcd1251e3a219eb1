"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from . import ops
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .tensor import ShapeError, Tape, Tensor, as_tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteGradientError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "is_grad_enabled",
    "no_grad",
    "ops",
]
