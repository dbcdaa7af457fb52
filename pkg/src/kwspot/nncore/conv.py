"""Causal dilated 1-d convolution with exact reverse-mode gradients.

Definition: y[t] = sum_k kernel[k] . x[t - (K-1-k)*d], with x[tau] = 0 for
tau < 0.  Left padding by (K-1)*d zeros keeps output length equal to input
length, which the streaming detector relies on.  After padding this becomes
y = sum_k xp[:, k*d : k*d+T] @ kernel[k], so each tap is one matmul.

Three execution paths share the definition: dense (groups=1), depthwise
(groups == Cin, multiplier 1) and grouped pointwise/general grouped.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch
from .tensor import Tensor, _accum, _make


def context_frames(kernel_size: int, dilation: int) -> int:
    """Left context (cache size) a causal conv needs: (K-1)*d frames."""
    return (kernel_size - 1) * dilation


def causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1, groups: int = 1) -> Tensor:
    """x: [B, T, Cin], w: [K, Cin//groups, Cout] -> [B, T, Cout]."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionMismatch(
            f"causal_conv1d: x{x.data.shape} and w{w.data.shape} must be 3-d"
        )
    if dilation < 1 or groups < 1:
        raise DimensionMismatch("causal_conv1d: dilation and groups must be >= 1")
    b, t, cin = x.data.shape
    k, cpg, cout = w.data.shape
    if k < 1:
        raise DimensionMismatch("causal_conv1d: kernel size must be >= 1")
    if cin % groups or cout % groups:
        raise DimensionMismatch(
            f"causal_conv1d: groups={groups} must divide Cin={cin} and Cout={cout}"
        )
    if cpg != cin // groups:
        raise DimensionMismatch(
            f"causal_conv1d: kernel expects {cpg} channels per group, "
            f"input provides {cin // groups}"
        )

    ctx = (k - 1) * dilation
    if ctx:
        pad = np.zeros((b, ctx, cin), dtype=x.data.dtype)
        xp = np.concatenate([pad, x.data], axis=1)
    else:
        xp = x.data

    depthwise = groups == cin and cpg == 1 and cout == cin
    if groups == 1:
        data, bwd = _dense(x, w, xp, b, t, cin, cout, k, dilation, ctx)
    elif depthwise:
        data, bwd = _depthwise(x, w, xp, b, t, cin, k, dilation, ctx)
    else:
        data, bwd = _grouped(x, w, xp, b, t, cin, cout, k, dilation, ctx, groups)
    return _make(data, (x, w), bwd, "causal_conv1d")


def _dense(x, w, xp, b, t, cin, cout, k, d, ctx):
    y = np.zeros((b, t, cout), dtype=x.data.dtype)
    for i in range(k):
        y += xp[:, i * d : i * d + t, :] @ w.data[i]

    def bwd(g):
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[i] = xp[:, i * d : i * d + t, :].reshape(-1, cin).T @ g2
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i * d : i * d + t, :] += g @ w.data[i].T
            _accum(x, gxp[:, ctx:, :] if ctx else gxp)

    return y, bwd


def _depthwise(x, w, xp, b, t, c, k, d, ctx):
    y = np.zeros((b, t, c), dtype=x.data.dtype)
    for i in range(k):
        y += xp[:, i * d : i * d + t, :] * w.data[i, 0]

    def bwd(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[i, 0] = (xp[:, i * d : i * d + t, :] * g).sum(axis=(0, 1))
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i * d : i * d + t, :] += g * w.data[i, 0]
            _accum(x, gxp[:, ctx:, :] if ctx else gxp)

    return y, bwd


def _grouped(x, w, xp, b, t, cin, cout, k, d, ctx, groups):
    cpg = cin // groups
    opg = cout // groups
    # kernel columns are grouped contiguously: output o sits in group o // opg
    wg = w.data.reshape(k, cpg, groups, opg).transpose(0, 2, 1, 3)  # [K,g,cpg,opg]
    y = np.zeros((b, t, cout), dtype=x.data.dtype)
    for i in range(k):
        xs = xp[:, i * d : i * d + t, :].reshape(b * t, groups, cpg)
        yi = np.matmul(xs.transpose(1, 0, 2), wg[i])  # [g, B*T, opg]
        y += yi.transpose(1, 0, 2).reshape(b, t, cout)

    def bwd(g):
        gg = g.reshape(b * t, groups, opg).transpose(1, 0, 2)  # [g, B*T, opg]
        if w.requires_grad:
            gwg = np.empty((k, groups, cpg, opg), dtype=w.data.dtype)
            for i in range(k):
                xs = xp[:, i * d : i * d + t, :].reshape(b * t, groups, cpg)
                gwg[i] = np.matmul(xs.transpose(1, 2, 0), gg)  # [g, cpg, opg]
            _accum(w, gwg.transpose(0, 2, 1, 3).reshape(k, cpg, cout))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxs = np.matmul(gg, wg[i].transpose(0, 2, 1))  # [g, B*T, cpg]
                gxp[:, i * d : i * d + t, :] += (
                    gxs.transpose(1, 0, 2).reshape(b, t, cin)
                )
            _accum(x, gxp[:, ctx:, :] if ctx else gxp)

    return y, bwd
