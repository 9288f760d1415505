"""Minimal reverse-mode autodiff over numpy arrays."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .params import Adam, ParamStore, adam_step
from .rng import RngStream, stream_id
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    apply,
    backward,
    current_tape,
    no_grad,
    op_kinds,
)

__all__ = [
    "Adam", "AutodiffError", "GradCheckReport", "NonFiniteError", "ParamStore", "RngStream",
    "ShapeError", "Tape", "Tensor", "adam_step", "apply", "backward", "current_tape",
    "grad_check", "no_grad", "op_kinds", "ops", "stream_id",
]
