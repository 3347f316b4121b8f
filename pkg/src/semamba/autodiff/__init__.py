"""Minimal reverse-mode differentiation on float64 numpy arrays."""

from . import ops
from .gradcheck import GradCheckReport, NonDeterministicError, grad_check
from .ops import primitive, unbroadcast
from .tensor import NonFiniteError, Tape, TapeError, Tensor, active_tape, as_tensor, backward

__all__ = [
    "GradCheckReport",
    "NonDeterministicError",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "grad_check",
    "ops",
    "primitive",
    "unbroadcast",
]
