"""Minimal reverse-mode autodiff engine over dense numpy arrays."""

from .tensor import (
    DIV_EPS,
    NonFiniteError,
    Tensor,
    abs_,
    add,
    clamp,
    concat,
    cos,
    div,
    elementwise,
    exp,
    is_grad_enabled,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    pad2d,
    pow2,
    reduce,
    reduce_min,
    relu,
    reshape,
    sigmoid,
    sin,
    slice_,
    sub,
    sum_,
    swap_last_axes,
)
from .conv import box_filter, conv2d
from .sampling import bilinear_sample, upsample_bilinear, upsample_nearest2x
from .gradcheck import GradCheckReport, check_gradient

__all__ = [
    "DIV_EPS",
    "GradCheckReport",
    "NonFiniteError",
    "Tensor",
    "abs_",
    "add",
    "bilinear_sample",
    "box_filter",
    "check_gradient",
    "clamp",
    "concat",
    "conv2d",
    "cos",
    "div",
    "elementwise",
    "exp",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "neg",
    "no_grad",
    "pad2d",
    "pow2",
    "reduce",
    "reduce_min",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "slice_",
    "sub",
    "sum_",
    "swap_last_axes",
    "upsample_bilinear",
    "upsample_nearest2x",
]
