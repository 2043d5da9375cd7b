"""Independent reference implementations and gradient-check utilities.

Everything here is deliberately naive (nested loops, central differences) so
it cannot share a failure mode with the vectorized library code it checks.
"""
from __future__ import annotations

import numpy as np


def naive_conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 stride: int = 1, padding: str = "same") -> np.ndarray:
    """Six-nested-loop 2-D convolution with same/valid zero padding."""
    t, h, w, cin = x.shape
    kh, kw, _, cout = weights.shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max(0, (oh - 1) * stride + kh - h)
        pw = max(0, (ow - 1) * stride + kw - w)
        pt, pl = ph // 2, pw // 2
        xp = np.zeros((t, h + ph, w + pw, cin), dtype=x.dtype)
        xp[:, pt : pt + h, pl : pl + w, :] = x
    elif padding == "valid":
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        xp = x
    else:
        raise ValueError(padding)
    out = np.zeros((t, oh, ow, cout), dtype=np.float64)
    for n in range(t):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            for ci in range(cin):
                                acc += xp[n, i * stride + ki, j * stride + kj, ci] * weights[ki, kj, ci, co]
                    out[n, i, j, co] = acc + bias[co]
    return out.astype(x.dtype)


def central_diff(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
        it.iternext()
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error with a floor so all-zero pairs compare equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)
