"""Reverse-mode differentiation over dense float64 tensors."""

from .correlation import DEFAULT_RIDGE, CorrelationWitness, correlation_objective, nuclear_correlation
from .tensor import Tape, Tensor, grad, no_grad, primitive_forward

__all__ = [
    "DEFAULT_RIDGE",
    "CorrelationWitness",
    "Tape",
    "Tensor",
    "correlation_objective",
    "grad",
    "no_grad",
    "nuclear_correlation",
    "primitive_forward",
]
