"""Minimal float64 tensor library with reverse-mode gradients."""

from .core import (
    GradTape,
    NonFiniteError,
    Tensor,
    abs_,
    add,
    as_tensor,
    check_finite,
    concat,
    div,
    exp,
    matmul,
    mean,
    mul,
    ones,
    reshape,
    slice_,
    split,
    sqrt,
    square,
    sub,
    sum_,
    tensor,
    transpose,
    zeros,
)
from .counters import count_macs
from .gradcheck import grad_check
from .io import load_tensor, save_tensor
from .ops import (
    conv2d,
    conv_transpose2d,
    layer_norm,
    linear,
    mish,
    sigmoid,
    softmax_rows,
    softplus,
    tanh,
)

__all__ = [name for name in dir() if not name.startswith("_")]
