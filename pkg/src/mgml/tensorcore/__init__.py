"""Minimal float64 tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .ops import (
    COSINE_EPS,
    add,
    concat,
    cosine_matrix,
    cosine_similarity,
    elementwise,
    gather_rows,
    matmul,
    mean,
    mul,
    normalize_rows,
    relu,
    reshape,
    scale,
    smooth_l1,
    softmax_cross_entropy,
    stack_scalars,
    sub,
    transpose,
)
from .ops import sum as tsum
from .tensor import BACKWARD_RULES, ContractError, DimensionError, TapeNode, Tensor, backward

__all__ = [
    "BACKWARD_RULES",
    "COSINE_EPS",
    "ContractError",
    "DimensionError",
    "TapeNode",
    "Tensor",
    "add",
    "backward",
    "concat",
    "cosine_matrix",
    "cosine_similarity",
    "elementwise",
    "gather_rows",
    "gradcheck",
    "matmul",
    "mean",
    "mul",
    "normalize_rows",
    "numerical_gradient",
    "ops",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "smooth_l1",
    "softmax_cross_entropy",
    "stack_scalars",
    "sub",
    "transpose",
    "tsum",
]
