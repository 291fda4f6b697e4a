"""Dense, ReLU, row-wise L2 normalization, and group normalization with
explicit forward/backward passes.

Each forward returns (output, cache); the matching backward consumes the
upstream gradient and the cache and returns exact analytic gradients. Inputs
may be a single vector or a [batch, features] matrix; outputs keep the rank
of the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .precision import default_dtype


def _as_rows(x):
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected 1-D or 2-D input, got shape {x.shape}")


@dataclass
class Dense:
    """y = x W^T + b with weight [out, in] and bias [out]."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"weight rows {self.weight.shape[0]} != bias size {self.bias.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=None) -> "Dense":
        """Kaiming-uniform weights for ReLU fan-in; bias uniform in the same
        bound (the usual torch-style linear init)."""
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        bound = math.sqrt(6.0 / in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b_bound = 1.0 / math.sqrt(in_dim)
        b = rng.uniform(-b_bound, b_bound, size=out_dim)
        return cls(w.astype(dtype), b.astype(dtype))


def dense_forward(layer: Dense, x):
    x2, squeeze = _as_rows(x)
    if x2.shape[1] != layer.in_dim:
        raise ValueError(f"input width {x2.shape[1]} != layer in_dim {layer.in_dim}")
    y = x2 @ layer.weight.T + layer.bias
    return (y[0] if squeeze else y), (x2, layer, squeeze)


def dense_backward(dout, cache):
    """Returns (dx, dweight, dbias)."""
    x2, layer, squeeze = cache
    d2, _ = _as_rows(dout)
    dw = d2.T @ x2
    db = d2.sum(axis=0)
    dx = d2 @ layer.weight
    return (dx[0] if squeeze else dx), dw, db


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dout, cache):
    return np.asarray(dout) * cache


def l2norm_forward(x):
    """Row-wise x / ||x||. Raises on any zero-norm row (a degenerate
    embedding, not a recoverable state)."""
    x2, squeeze = _as_rows(x)
    norms = np.sqrt((x2 * x2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("cannot L2-normalize a zero vector")
    y = x2 / norms
    return (y[0] if squeeze else y), (y, norms, squeeze)


def l2norm_backward(dout, cache):
    y, norms, squeeze = cache
    d2, _ = _as_rows(dout)
    # d(x/||x||) = (I - y y^T) / ||x||
    dx = (d2 - y * (d2 * y).sum(axis=1, keepdims=True)) / norms
    return dx[0] if squeeze else dx


def l2_normalize(x):
    """Forward-only convenience wrapper around :func:`l2norm_forward`."""
    y, _ = l2norm_forward(x)
    return y


def default_group_count(channels: int) -> int:
    """32 groups when the channel count allows it, otherwise the largest
    divisor of ``channels`` not exceeding 32."""
    if channels >= 32 and channels % 32 == 0:
        return 32
    for g in range(min(32, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass
class GroupNorm:
    """Per-sample group standardization with learned scale/shift; statistics
    never couple across the batch."""

    num_groups: int
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.beta.shape != (c,):
            raise ValueError("gamma and beta must have the same shape")
        if self.num_groups < 1 or c % self.num_groups != 0:
            raise ValueError(f"{c} channels not divisible into {self.num_groups} groups")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, channels: int, num_groups: int | None = None, eps: float = 1e-5, dtype=None) -> "GroupNorm":
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        groups = default_group_count(channels) if num_groups is None else num_groups
        return cls(groups, np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype), eps)


def group_norm_forward(layer: GroupNorm, x):
    x2, squeeze = _as_rows(x)
    n, c = x2.shape
    if c != layer.channels:
        raise ValueError(f"input width {c} != {layer.channels} channels")
    g = layer.num_groups
    xg = x2.reshape(n, g, c // g)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = ((xg - mean) * inv).reshape(n, c)
    y = layer.gamma * xhat + layer.beta
    return (y[0] if squeeze else y), (xhat, inv, layer, squeeze)


def group_norm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv, layer, squeeze = cache
    d2, _ = _as_rows(dout)
    n, c = d2.shape
    g = layer.num_groups
    m = c // g

    dgamma = (d2 * xhat).sum(axis=0)
    dbeta = d2.sum(axis=0)

    dxhat = (d2 * layer.gamma).reshape(n, g, m)
    xhat_g = xhat.reshape(n, g, m)
    sum_d = dxhat.sum(axis=2, keepdims=True)
    sum_dx = (dxhat * xhat_g).sum(axis=2, keepdims=True)
    dx = (inv / m) * (m * dxhat - sum_d - xhat_g * sum_dx)
    dx = dx.reshape(n, c)
    return (dx[0] if squeeze else dx), dgamma, dbeta
