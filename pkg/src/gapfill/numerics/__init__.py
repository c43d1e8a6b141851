"""Minimal dense-tensor substrate with reverse-mode gradients.

Everything the model computes is built from these ops; `grad_check` is the
independent finite-difference oracle used to verify every backward formula.
"""

from .tensor import Tensor, backward, constant, parameter, set_strict, strict_enabled, toposort
from .ops import (
    absolute,
    add,
    broadcast_to,
    concat,
    div,
    dropout,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    reshape,
    softmax,
    square,
    sub,
    take_rows,
    take_slice,
    tanh,
    tmax,
    tmean,
    tmin,
    transpose,
    tsum,
)
from .gradcheck import grad_check
from .checkpoint import load_tensors, save_tensors

__all__ = [
    "Tensor",
    "backward",
    "constant",
    "parameter",
    "set_strict",
    "strict_enabled",
    "toposort",
    "grad_check",
    "load_tensors",
    "save_tensors",
    "absolute",
    "add",
    "broadcast_to",
    "concat",
    "div",
    "dropout",
    "exp",
    "gelu",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "reshape",
    "softmax",
    "square",
    "sub",
    "take_rows",
    "take_slice",
    "tanh",
    "tmax",
    "tmean",
    "tmin",
    "transpose",
    "tsum",
]
