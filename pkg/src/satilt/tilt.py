"""Cyclic multi-label encoding of tilt angles, decoding and angle metrics.

Angles are integer degrees in [0, 359], measured anticlockwise from upright.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor

D = 360
TIE_TOL = 1e-9


def encode_labels(G: int, I: int, D: int = D) -> np.ndarray:
    """0/1 vector of length D with ones at (G + k) mod D for |k| <= I."""
    if not 0 <= I < D / 2:
        raise ValueError(f"interval I={I} must satisfy 0 <= I < {D / 2}")
    y = np.zeros(D)
    y[np.mod(G + np.arange(-I, I + 1), D)] = 1.0
    return y


def bce_loss(y, p) -> Tensor:
    """Binary cross-entropy, mean over outputs (and over the batch for 2-D input)."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    return ops.bce(p, y)


def decode_prediction(p) -> int:
    """Highest scoring angle; ties (within 1e-9) resolve to their circular mean."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty prediction")
    n = p.size
    ties = np.flatnonzero(p >= p.max() - TIE_TOL)
    if ties.size == 1:
        return int(ties[0])
    theta = 2.0 * math.pi * ties / n
    s, c = np.sin(theta).sum(), np.cos(theta).sum()
    if math.hypot(s, c) < 1e-9:
        # ties spread evenly round the circle have no mean direction
        return int(ties[0])
    ang = math.atan2(s, c)
    return int(round(ang * n / (2.0 * math.pi))) % n


def angle_error(a_true, a_pred):
    """Circular distance in degrees, in [0, 180]. Works elementwise on arrays."""
    e = np.abs(np.asarray(a_true) - np.asarray(a_pred))
    out = np.minimum(e, 360 - e)
    return out.item() if out.ndim == 0 else out


def accuracy(pairs: Sequence, I: int) -> float:
    """Fraction of (a_true, a_pred) pairs whose angle error is at most I."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("accuracy of an empty list")
    t, p = np.array(pairs, dtype=np.int64).T
    return float(np.mean(angle_error(t, p) <= I))


def encode_batch(angles: Iterable[int], I: int) -> np.ndarray:
    return np.stack([encode_labels(int(a), I) for a in angles])
