import numpy as np
import pytest

from satilt.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tracked(arr):
    return Tensor(np.array(arr, dtype=np.float64), tracked=True)


def loop_conv2d(x, k, stride, padding):
    """Direct six-loop cross-correlation on one (H, W, Cin) image."""
    H, W, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        Ho, Wo = -(-H // stride), -(-W // stride)
        ph = max((Ho - 1) * stride + kh - H, 0)
        pw = max((Wo - 1) * stride + kw - W, 0)
        top, left = ph // 2, pw // 2
    else:
        Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
        top = left = 0
    out = np.zeros((Ho, Wo, cout))
    for i in range(Ho):
        for j in range(Wo):
            for co in range(cout):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        r, c = i * stride + a - top, j * stride + b - left
                        if 0 <= r < H and 0 <= c < W:
                            for ci in range(cin):
                                acc += x[r, c, ci] * k[a, b, ci, co]
                out[i, j, co] = acc
    return out
