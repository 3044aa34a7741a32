"""Minimal reverse-mode autodiff with gradient reversal as a first-class op."""

from .engine import (
    CatalogError,
    GradientMap,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_dtype,
    precision,
    set_precision,
)
from .gradcheck import finite_difference_check
from . import ops
from .ops import apply_primitive, catalog, grad_reverse, register_primitive

__all__ = [
    "CatalogError",
    "GradientMap",
    "ShapeError",
    "Tape",
    "Tensor",
    "apply_primitive",
    "as_tensor",
    "backward",
    "catalog",
    "current_dtype",
    "finite_difference_check",
    "grad_reverse",
    "ops",
    "precision",
    "register_primitive",
    "set_precision",
]
