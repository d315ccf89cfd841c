"""Squeeze-and-excite channel gating and spatial self-attention blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A block or model configuration violates its invariants."""


@dataclass
class SEParams:
    w1: Tensor  # (C, C/r_se)
    b1: Tensor
    w2: Tensor  # (C/r_se, C)
    b2: Tensor
    r_se: int = 4

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class SAParams:
    W_K: Tensor  # (C, C')
    W_Q: Tensor  # (C, C')
    W_v_low: Tensor  # (C, C')
    W_V: Tensor  # (C', C)
    alpha: Tensor  # scalar
    r: int = 8

    @property
    def channels(self) -> int:
        return self.W_K.shape[0]

    def tensors(self) -> dict:
        return {
            "W_K": self.W_K,
            "W_Q": self.W_Q,
            "W_v_low": self.W_v_low,
            "W_V": self.W_V,
            "alpha": self.alpha,
        }


def init_se_params(channels: int, rng: np.random.Generator, r_se: int = 4) -> SEParams:
    if r_se < 1 or channels % r_se:
        raise ConfigError(f"SE reduction {r_se} does not divide {channels} channels")
    mid = channels // r_se
    return SEParams(
        w1=Tensor(ops.glorot_uniform(rng, (channels, mid), channels, mid), tracked=True),
        b1=Tensor(np.zeros(mid), tracked=True),
        w2=Tensor(ops.glorot_uniform(rng, (mid, channels), mid, channels), tracked=True),
        b2=Tensor(np.zeros(channels), tracked=True),
        r_se=r_se,
    )


def init_sa_params(channels: int, rng: np.random.Generator, r: int = 8) -> SAParams:
    """Glorot-uniform projections, alpha starts at exactly 0."""
    if r < 1 or channels % r:
        raise ConfigError(f"SA reduction {r} does not divide {channels} channels")
    low = channels // r

    def proj(shape):
        return Tensor(ops.glorot_uniform(rng, shape, shape[0], shape[1]), tracked=True)

    return SAParams(
        W_K=proj((channels, low)),
        W_Q=proj((channels, low)),
        W_v_low=proj((channels, low)),
        W_V=proj((low, channels)),
        alpha=Tensor(0.0, tracked=True),
        r=r,
    )


def se_gate(F: Tensor, p: SEParams) -> Tensor:
    """Channel gate in (0, 1), shape (..., C)."""
    if F.shape[-1] != p.channels:
        raise ShapeError(f"squeeze_excite: input has {F.shape[-1]} channels, params expect {p.channels}")
    pooled = ops.global_avg_pool(F)
    squeeze_1d = pooled.ndim == 1
    if squeeze_1d:
        pooled = ops.reshape(pooled, (1, -1))
    h = ops.relu(ops.add(ops.matmul(pooled, p.w1), p.b1))
    gate = ops.sigmoid(ops.add(ops.matmul(h, p.w2), p.b2))
    if squeeze_1d:
        gate = ops.reshape(gate, (p.channels,))
    return gate


def squeeze_excite(F: Tensor, p: SEParams) -> Tensor:
    gate = se_gate(F, p)
    lead = gate.shape[:-1]
    return ops.mul(F, ops.reshape(gate, lead + (1, 1, p.channels)))


def flatten_regions(F: Tensor) -> Tensor:
    """(..., H, W, C) -> (..., H*W, C); position (h, w) becomes row h*W + w."""
    *lead, H, W, C = F.shape
    return ops.reshape(F, (*lead, H * W, C))


def attention_matrix(Fmat: Tensor, p: SAParams) -> Tensor:
    """Row-stochastic (N, N) attention between regions, batched over leading axes."""
    if Fmat.shape[-1] != p.channels:
        raise ShapeError(f"attention_matrix: {Fmat.shape[-1]} columns, params expect {p.channels}")
    K = ops.matmul(Fmat, p.W_K)
    Q = ops.matmul(Fmat, p.W_Q)
    return ops.softmax_rows(ops.matmul(Q, ops.transpose(K)))


def spatial_self_attention_rows(Fmat: Tensor, p: SAParams, capture: Optional[list] = None) -> Tensor:
    """Self-attention on region rows: Fmat + alpha * (a @ Fmat W_v') W_V."""
    a = attention_matrix(Fmat, p)
    if capture is not None:
        capture.append(a.data)
    v_low = ops.matmul(Fmat, p.W_v_low)
    S = ops.matmul(ops.matmul(a, v_low), p.W_V)
    return ops.add(Fmat, ops.mul(p.alpha, S))


def spatial_self_attention(F: Tensor, p: SAParams, capture: Optional[list] = None) -> Tensor:
    """Apply spatial self-attention to an (..., H, W, C) feature map.

    If ``capture`` is a list, the attention matrix is appended to it.
    """
    C = F.shape[-1]
    if C % p.r or C // p.r != p.W_K.shape[1]:
        raise ConfigError(f"channels {C} incompatible with reduction ratio {p.r}")
    out = spatial_self_attention_rows(flatten_regions(F), p, capture)
    return ops.reshape(out, F.shape)


def heatmap(a, query: int, H: int, W: int) -> np.ndarray:
    """Row ``query`` of an attention matrix as an (H, W) map scaled to [0, 1].

    A constant row maps to all zeros.
    """
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    N = a.shape[-1]
    if N != H * W:
        raise ShapeError(f"attention matrix has {N} regions, grid is {H}x{W}")
    if not 0 <= query < N:
        raise IndexError(f"query region {query} outside [0, {N})")
    row = a[query].reshape(H, W)
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.zeros((H, W))
    return (row - lo) / (hi - lo)
