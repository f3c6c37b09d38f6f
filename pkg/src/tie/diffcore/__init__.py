"""Minimal dense-tensor autodiff: primitives, layers, losses and Adam."""
from .layers import Linear
from .losses import soft_cross_entropy, weighted_cross_entropy
from .optim import Adam, adam_step
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    clamp_min,
    concat,
    div,
    exp,
    frozen,
    getitem,
    get_tape,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reset_tape,
    reshape,
    scale,
    sigmoid,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
)

__all__ = [
    "Adam", "Linear", "Parameter", "Tape", "Tensor", "adam_step", "add", "backward",
    "clamp_min", "concat", "div", "exp", "frozen", "get_tape", "getitem", "is_grad_enabled", "log",
    "log_softmax", "matmul", "mean", "mul", "neg", "no_grad", "relu", "reset_tape",
    "reshape", "scale", "sigmoid", "soft_cross_entropy", "softmax", "sqrt", "square",
    "sub", "sum_", "tanh", "weighted_cross_entropy",
]
