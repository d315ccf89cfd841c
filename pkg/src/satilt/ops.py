"""Differentiable operations on :class:`~satilt.tensor.Tensor`.

Image tensors are channels-last: ``(H, W, C)`` for one image or
``(B, H, W, C)`` for a batch. Convolutions are cross-correlations.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.tracked else None,
            _unbroadcast(g * a.data, b.shape) if b.tracked else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


# Piecewise ops report which linear piece each element falls in while a
# probe is active, so a finite-difference check can tell when a perturbation
# stepped across a kink.
_region_log: list | None = None


class region_probe:
    """Collect piece signatures of the piecewise ops run inside the block."""

    def __enter__(self) -> list:
        global _region_log
        self._prev = _region_log
        _region_log = []
        return _region_log

    def __exit__(self, *exc) -> None:
        global _region_log
        _region_log = self._prev


def _note_regions(pieces: np.ndarray) -> None:
    if _region_log is not None:
        _region_log.append(np.ascontiguousarray(pieces, dtype=np.int64).tobytes())


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_regions(mask)
    return record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def hardswish(x: Tensor) -> Tensor:
    """x * clamp(x + 3, 0, 6) / 6."""
    d = x.data
    y = d * np.clip(d + 3.0, 0.0, 6.0) / 6.0
    _note_regions((d > -3.0).astype(np.int64) + (d > 3.0))

    def vjp(g):
        dy = np.where(d < -3.0, 0.0, np.where(d > 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        return (g * dy,)

    return record(y, (x,), vjp)


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "hardswish": hardswish,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def activation(name: str, x: Tensor) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "hardswish":
        return hardswish(x)
    if name in ("identity", "linear", None):
        return x
    raise ValueError(f"unknown activation {name!r}")


# ----------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: (..., H, W, C) -> (..., C)."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs (..., H, W, C), got {x.shape}")
    shape = x.shape
    hw = shape[-3] * shape[-2]
    out = x.data.mean(axis=(-3, -2))

    def vjp(g):
        return (np.broadcast_to((g / hw)[..., None, None, :], shape).copy(),)

    return record(out, (x,), vjp)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.tracked:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.tracked:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), vjp)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (m,), vjp)


# ----------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        return (n - k) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pads(n: int, k: int, stride: int, padding: str) -> tuple:
    if padding == "valid":
        return 0, 0
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _prepare(x: Tensor, kh: int, kw: int, stride: int, padding: str, opname: str):
    if stride < 1:
        raise ValueError(f"{opname}: stride must be >= 1, got {stride}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"{opname}: input must be (H, W, C) or (B, H, W, C), got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    pt, pb = _pads(H, kh, stride, padding)
    pl, pr = _pads(W, kw, stride, padding)
    if kh > H + pt + pb or kw > W + pl + pr:
        raise ShapeError(
            f"{opname}: kernel {kh}x{kw} larger than padded input {H + pt + pb}x{W + pl + pr}"
        )
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    return (pt, pb, pl, pr), Ho, Wo


def _pad(d: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return d
    width = [(0, 0)] * (d.ndim - 3) + [(pt, pb), (pl, pr), (0, 0)]
    return np.pad(d, width)


def _unpad(d: np.ndarray, pads, H: int, W: int) -> np.ndarray:
    pt, _, pl, _ = pads
    return d[..., pt : pt + H, pl : pl + W, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` (..., H, W, Cin) with ``kernel`` (kh, kw, Cin, Cout)."""
    if kernel.ndim != 4 or kernel.shape[2] != x.shape[-1]:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    kh, kw, cin, cout = kernel.shape
    pads, Ho, Wo = _prepare(x, kh, kw, stride, padding, "conv2d")
    H, W = x.shape[-3], x.shape[-2]
    k = kernel.data

    if kh == 1 and kw == 1:
        xs = x.data[..., ::stride, ::stride, :]
        out = xs @ k[0, 0]

        def vjp(g):
            gx = gk = None
            if x.tracked:
                gs = g @ k[0, 0].T
                if stride == 1:
                    gx = gs
                else:
                    gx = np.zeros_like(x.data)
                    gx[..., ::stride, ::stride, :] = gs
            if kernel.tracked:
                gk = (xs.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(k.shape)
            return gx, gk

        return record(out, (x, kernel), vjp)

    xp = _pad(x.data, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    # win: (..., H', W', Cin, kh, kw) before striding
    win = win[..., : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride, :, :, :]
    kt = k.transpose(2, 0, 1, 3)  # (Cin, kh, kw, Cout)
    out = np.tensordot(win, kt, axes=([-3, -2, -1], [0, 1, 2]))

    def vjp(g):
        gx = gk = None
        if kernel.tracked:
            lead = win.ndim - 3
            gkt = np.tensordot(win, g, axes=(list(range(lead)), list(range(lead))))
            gk = gkt.transpose(1, 2, 0, 3)
        if x.tracked:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        ...,
                        i : i + (Ho - 1) * stride + 1 : stride,
                        j : j + (Wo - 1) * stride + 1 : stride,
                        :,
                    ] += g @ k[i, j].T
            gx = _unpad(gxp, pads, H, W)
        return gx, gk

    return record(out, (x, kernel), vjp)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel cross-correlation; ``kernel`` is (kh, kw, C)."""
    if kernel.ndim != 3 or kernel.shape[2] != x.shape[-1]:
        raise ShapeError(
            f"depthwise_conv2d: kernel {kernel.shape} does not match input {x.shape}"
        )
    kh, kw, _ = kernel.shape
    pads, Ho, Wo = _prepare(x, kh, kw, stride, padding, "depthwise_conv2d")
    H, W = x.shape[-3], x.shape[-2]
    xp = _pad(x.data, pads)
    k = kernel.data
    hs = (Ho - 1) * stride + 1
    ws = (Wo - 1) * stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(-3, -2))[..., :hs:stride, :ws:stride, :, :, :]
    out = np.einsum("...hwcij,ijc->...hwc", win, k, optimize=True)

    def vjp(g):
        gx = gk = None
        if kernel.tracked:
            gk = np.einsum("...hwcij,...hwc->ijc", win, g, optimize=True)
        if x.tracked:
            # scatter back = correlate the zero-dilated, fully padded gradient
            # with the flipped kernel
            lead = g.shape[:-3]
            gd = np.zeros(lead + (hs + 2 * (kh - 1), ws + 2 * (kw - 1), g.shape[-1]))
            gd[..., kh - 1 : kh - 1 + hs : stride, kw - 1 : kw - 1 + ws : stride, :] = g
            gwin = sliding_window_view(gd, (kh, kw), axis=(-3, -2))
            part = np.einsum("...hwcij,ijc->...hwc", gwin, k[::-1, ::-1], optimize=True)
            gxp = np.zeros_like(xp)
            gxp[..., : hs + kh - 1, : ws + kw - 1, :] = part
            gx = _unpad(gxp, pads, H, W)
        return gx, gk

    return record(out, (x, kernel), vjp)


# ----------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-3):
    """Training-mode batch norm over every axis but the last.

    Returns ``(y, batch_mean, batch_var)``; the statistics are plain arrays
    for the caller's running averages.
    """
    shape = x.shape
    x2 = x.data.reshape(-1, shape[-1])
    m = x2.shape[0]
    mu = x2.mean(axis=0)
    xc = x2 - mu
    var = np.einsum("mc,mc->c", xc, xc) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data).reshape(shape)

    def vjp(g):
        g2 = g.reshape(-1, shape[-1])
        gx = None
        ggamma = np.einsum("mc,mc->c", g2, xhat)
        gbeta = g2.sum(axis=0)
        if x.tracked:
            gxhat = g2 * gamma.data
            gx = ((inv / m) * (m * gxhat - gbeta * gamma.data - xhat * (ggamma * gamma.data))).reshape(shape)
        return (
            gx,
            ggamma if gamma.tracked else None,
            gbeta if beta.tracked else None,
        )

    return record(y, (x, gamma, beta), vjp), mu, var


def affine_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                eps: float = 1e-3) -> Tensor:
    """Inference-mode batch norm using fixed statistics."""
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    axes = tuple(range(x.ndim - 1))

    def vjp(g):
        return (
            g * (gamma.data * inv) if x.tracked else None,
            (g * xhat).sum(axis=axes) if gamma.tracked else None,
            g.sum(axis=axes) if beta.tracked else None,
        )

    return record(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


# ----------------------------------------------------------------------------
# losses


BCE_CLAMP = 1e-12


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy between scores ``p`` and 0/1 targets ``y``.

    Scores are clamped to [1e-12, 1 - 1e-12] before the logs; the gradient
    is zero where the clamp is active. For a batch (B, D) this is the mean of
    the per-image losses.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"bce: targets {y.shape} vs scores {p.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    # compensated sum keeps the loss accurate to an ulp, which finite-difference checks rely on
    loss = -math.fsum((y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).ravel()) / n
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1.0 - BCE_CLAMP)
    _note_regions(inside)

    def vjp(g):
        d = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
        return (g * d * inside,)

    return record(np.asarray(loss), (p,), vjp)


def angle_loss(pred: Tensor, a_true) -> Tensor:
    """Mean circular angle error in degrees, predictions taken mod 360.

    Per element: e = |a_true - (pred mod 360)|, loss = min(e, 360 - e). The
    subgradient is 0 where e is 0 or 180.
    """
    a_true = np.asarray(a_true, dtype=np.float64)
    if a_true.shape != pred.shape:
        raise ShapeError(f"angle_loss: targets {a_true.shape} vs predictions {pred.shape}")
    wrapped = np.mod(pred.data, 360.0)
    diff = wrapped - a_true
    e = np.abs(diff)
    loss = np.minimum(e, 360.0 - e)
    _note_regions(np.sign(diff) + 3 * (e < 180.0) + 6 * np.floor(pred.data / 360.0))
    n = pred.size

    def vjp(g):
        d = np.where(e < 180.0, np.sign(diff), -np.sign(diff))
        d = np.where((e == 0.0) | (e == 180.0), 0.0, d)
        return (g * d / n,)

    return record(np.asarray(loss.mean()), (pred,), vjp)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
