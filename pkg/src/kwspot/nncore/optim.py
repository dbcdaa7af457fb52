"""Adam optimizer with L2 weight decay added to the gradient.

Update per step (classic Adam, not the decoupled variant):
    g <- grad + weight_decay * value
    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2
    value <- value - lr * mhat / (sqrt(vhat) + eps)
with bias-corrected mhat = m/(1-b1^t), vhat = v/(1-b2^t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient
from .tensor import Parameter


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def init_adam(
    param: Parameter,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> AdamState:
    return AdamState(
        m=np.zeros_like(param.value),
        v=np.zeros_like(param.value),
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adam_step(param: Parameter, state: AdamState) -> None:
    g = param.grad
    if g is None:
        g = np.zeros_like(param.value)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient for parameter {param.name}")
    if state.weight_decay:
        g = g + state.weight_decay * param.value
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    state.step += 1
    t = state.step
    mhat = state.m / (1.0 - state.beta1**t)
    vhat = state.v / (1.0 - state.beta2**t)
    param.tensor.data = param.value - state.lr * mhat / (np.sqrt(vhat) + state.eps)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = []
    for p in params:
        if p.trainable and p.grad is not None:
            grads.append(p)
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = np.asarray(max_norm / norm, dtype=np.float32)
        for p in grads:
            p.tensor.grad = p.grad * p.grad.dtype.type(scale)
    return norm
