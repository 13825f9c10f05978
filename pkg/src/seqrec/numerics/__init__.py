"""Tensor arithmetic with reverse-mode differentiation and Adam."""

from .gradcheck import GradCheckReport, grad_check, grad_check_params, numerical_gradient, relative_error
from .optim import Adam, NonFiniteGradientError, OptimizerState, adam_step, init_state
from .tensor import ShapeError, Tape, TapeError, Tensor, backward, forward, softmax

__all__ = [
    "Adam",
    "GradCheckReport",
    "NonFiniteGradientError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "forward",
    "grad_check",
    "grad_check_params",
    "init_state",
    "numerical_gradient",
    "relative_error",
    "softmax",
]
