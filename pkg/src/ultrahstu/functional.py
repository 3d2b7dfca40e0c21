"""Pointwise activations and layer normalization with hand-written gradients."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

LN_EPS = 1e-6


def sigmoid(x):
    return expit(x)


def silu(x):
    """x * sigmoid(x)."""
    return x * expit(x)


def silu_grad(x):
    """d silu / dx = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def layer_norm_stats(x: np.ndarray, eps: float = LN_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and inverse standard deviation."""
    mean = x.mean(axis=-1)
    centered = x - mean[..., None]
    var = (centered * centered).mean(axis=-1)
    return mean, 1.0 / np.sqrt(var + eps)


def layer_norm_apply(x, mean, rstd, scale, bias):
    # shared by forward and rematerialization so both produce identical bits
    return (x - mean[..., None]) * rstd[..., None] * scale + bias


def layer_norm_forward(x, scale, bias, eps: float = LN_EPS):
    """Returns ``(normed, (mean, rstd))``."""
    mean, rstd = layer_norm_stats(x, eps)
    return layer_norm_apply(x, mean, rstd, scale, bias), (mean, rstd)


def layer_norm_backward(dout, x, mean, rstd, scale):
    """Gradients ``(dx, dscale, dbias)`` of :func:`layer_norm_forward`."""
    xhat = (x - mean[..., None]) * rstd[..., None]
    dscale = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * scale
    dx = rstd[..., None] * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dscale, dbias


def softplus(x):
    return np.logaddexp(0.0, x)
