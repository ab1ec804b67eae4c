"""Minimal numpy-backed autodiff: tensors, fused losses, AdamW, gradcheck."""

from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    causal_conv1d,
    concat,
    default_dtype,
    div,
    embedding,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    log,
    matmul,
    mul,
    narrow,
    no_grad,
    parameter,
    precision,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    sqrt,
    sub,
    tanh,
    tensor,
    transpose,
)
from .losses import cosine_alignment, mse, poisson_nll
from .optim import AdamW, Schedule
from .gradcheck import check_gradients, numeric_grad, rel_error

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "backward",
    "causal_conv1d",
    "concat",
    "default_dtype",
    "div",
    "embedding",
    "exp",
    "gather_rows",
    "gelu",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "parameter",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "softmax",
    "sqrt",
    "sub",
    "tanh",
    "tensor",
    "transpose",
    "cosine_alignment",
    "mse",
    "poisson_nll",
    "AdamW",
    "Schedule",
    "check_gradients",
    "numeric_grad",
    "rel_error",
]
