"""Minimal differentiable-computation kernel used by the models and trainer."""

from .conv import causal_conv1d, context_frames
from .norm import batchnorm
from .optim import AdamState, adam_step, clip_global_norm, init_adam
from .tensor import (
    Parameter,
    Tensor,
    add,
    clamp,
    concat_last,
    gather_time,
    grad_enabled,
    log,
    matmul_last,
    mean_all,
    mul,
    neg,
    no_grad,
    relu,
    set_finite_checks,
    sigmoid,
    sub,
    sum_last,
    weighted_time_sum,
)

__all__ = [
    "AdamState",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "batchnorm",
    "causal_conv1d",
    "clamp",
    "clip_global_norm",
    "concat_last",
    "context_frames",
    "gather_time",
    "grad_enabled",
    "init_adam",
    "log",
    "matmul_last",
    "mean_all",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "set_finite_checks",
    "sigmoid",
    "sub",
    "sum_last",
    "weighted_time_sum",
]
