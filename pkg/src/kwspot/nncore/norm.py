"""Batch normalization over valid frames of padded [B, T, C] batches.

Train mode normalizes each channel by statistics of the frames selected by
the mask (population variance) and updates running stats with momentum.
Padded frames still receive normalized outputs, but they never contribute
to the statistics and downstream losses never read them.  Infer mode is a
frame-local affine map using the frozen running stats, which is what makes
streaming and batch-norm folding possible.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch
from .tensor import Tensor, _accum, _make


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    train: bool,
    mask: np.ndarray | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionMismatch(f"batchnorm: expected [B,T,C], got {x.data.shape}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionMismatch(
            f"batchnorm: affine shape {gamma.data.shape} does not match C={c}"
        )
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionMismatch("batchnorm: running stats do not match C")

    if not train:
        istd = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * istd).astype(x.data.dtype)
        shift = (beta.data - running_mean * gamma.data * istd).astype(x.data.dtype)
        data = x.data * scale + shift

        def bwd_infer(g):
            if x.requires_grad:
                _accum(x, g * scale)
            if gamma.requires_grad:
                _accum(gamma, (g * ((x.data - running_mean) * istd)).sum(axis=(0, 1)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 1)))

        return _make(data, (x, gamma, beta), bwd_infer, "batchnorm_infer")

    if mask is None:
        m = np.ones(x.data.shape[:2] + (1,), dtype=x.data.dtype)
    else:
        if mask.shape != x.data.shape[:2] + (1,):
            raise DimensionMismatch(
                f"batchnorm: mask shape {mask.shape} != {x.data.shape[:2] + (1,)}"
            )
        m = np.asarray(mask, dtype=x.data.dtype)
    n = m.sum(dtype=x.data.dtype)
    if float(n) < 2.0:
        raise DimensionMismatch("batchnorm: need at least 2 valid frames")

    xm = x.data * m
    mu = xm.sum(axis=(0, 1)) / n
    xc = x.data - mu
    var = ((xc * xc) * m).sum(axis=(0, 1)) / n
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    data = gamma.data * xhat + beta.data

    running_mean[...] = (1.0 - momentum) * running_mean + momentum * mu
    running_var[...] = (1.0 - momentum) * running_var + momentum * var

    def bwd_train(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 1)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxh = g * gamma.data
            sum_g = gxh.sum(axis=(0, 1))
            sum_gx = (gxh * xhat).sum(axis=(0, 1))
            # only masked positions feed the statistics, hence the m factor
            # on the mean/variance back-paths
            gx = istd * (gxh - (m / n) * (sum_g + xhat * sum_gx))
            _accum(x, gx)

    return _make(data, (x, gamma, beta), bwd_train, "batchnorm_train")
