"""Minimal float64 reverse-mode autodiff used by every model component."""

from . import checkpoint, ops
from .core import (
    DTYPE,
    MASK_VALUE,
    NumericError,
    Tensor,
    as_tensor,
    backward,
    parameters,
    set_finite_checks,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW

__all__ = [
    "AdamW",
    "DTYPE",
    "GradCheckReport",
    "MASK_VALUE",
    "NumericError",
    "Tensor",
    "as_tensor",
    "backward",
    "checkpoint",
    "grad_check",
    "ops",
    "parameters",
    "set_finite_checks",
]
