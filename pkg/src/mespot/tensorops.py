"""Rank-4 tensor primitives: convolution, transposed convolution, layer
normalization, nearest-neighbour resize, and the ADAM update.

All tensors are plain numpy arrays of shape (t, h, w, c) where the leading
axis is time (or batch: entries are independent). Forward passes and their
hand-derived backward passes live side by side; there is no autodiff graph.
Operations preserve the input dtype, so callers can run float32 for speed or
float64 for gradient checking. Explicit reductions accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "ConvKernel",
    "AdamState",
    "conv2d",
    "conv2d_grad",
    "transposed_conv2d",
    "transposed_conv2d_grad",
    "resize_nearest",
    "resize_nearest_grad",
    "layer_norm",
    "layer_norm_grad",
    "relu",
    "relu_grad",
    "adam_step",
]

LAYER_NORM_EPS = 1e-5


@dataclass
class ConvKernel:
    """A 2-D convolution kernel: weights (kh, kw, cin, cout) plus per-output-
    channel bias. Also used as the container for kernel gradients."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.ndim}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match cout={self.weights.shape[3]}"
            )

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def cin(self) -> int:
        return self.weights.shape[2]

    @property
    def cout(self) -> int:
        return self.weights.shape[3]


def _check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must have shape (t, h, w, c), got {x.shape}")
    return x


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for same-padding."""
    out = -(-size // stride)  # ceil division
    pad = max(0, (out - 1) * stride + k - size)
    return out, pad // 2, pad - pad // 2


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than valid input {h}x{w}")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, (pt, pb, pl, pr)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    """Gather (t·oh·ow, kh·kw·c) patch matrix; column order matches
    weights.reshape(kh*kw*cin, cout)."""
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (t, oh, ow, c, kh, kw)
    t, oh, ow = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(t * oh * ow, kh * kw * x.shape[3])
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    t, h, w, c = x_shape
    pt, pb, pl, pr = pads
    oh = (h + pt + pb - kh) // stride + 1
    ow = (w + pl + pr - kw) // stride + 1
    dxp = np.zeros((t, h + pt + pb, w + pl + pr, c), dtype=dcols.dtype)
    d6 = dcols.reshape(t, oh, ow, kh, kw, c)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :] += d6[
                :, :, :, ki, kj, :
            ]
    return dxp[:, pt : pt + h, pl : pl + w, :]


def conv2d(x: np.ndarray, kernel: ConvKernel, stride: int = 1, padding: str = "same") -> np.ndarray:
    """2-D convolution over the spatial axes, applied independently per time step.

    With same-padding and stride s the output spatial dims are ceil(h/s),
    ceil(w/s). The result is linear in the input; activations are applied
    separately by the caller.
    """
    x = _check_tensor4(x)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.shape[3] != kernel.cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {kernel.cin}")
    t, h, w, _ = x.shape
    oh, ow, pads = _conv_geometry(h, w, kernel.kh, kernel.kw, stride, padding)
    cols = _im2col(x, kernel.kh, kernel.kw, stride, pads)
    w2d = kernel.weights.reshape(-1, kernel.cout).astype(x.dtype, copy=False)
    out = cols @ w2d
    out += kernel.bias.astype(x.dtype, copy=False)
    return out.reshape(t, oh, ow, kernel.cout)


def conv2d_grad(
    x: np.ndarray,
    kernel: ConvKernel,
    upstream: np.ndarray,
    stride: int = 1,
    padding: str = "same",
) -> tuple[np.ndarray, ConvKernel]:
    """Exact gradients of conv2d contracted with `upstream`.

    Returns (dInput, dKernel) where dKernel carries the weight and bias
    gradients in a ConvKernel container.
    """
    x = _check_tensor4(x)
    upstream = _check_tensor4(upstream, "upstream")
    t, h, w, _ = x.shape
    oh, ow, pads = _conv_geometry(h, w, kernel.kh, kernel.kw, stride, padding)
    if upstream.shape != (t, oh, ow, kernel.cout):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match conv output {(t, oh, ow, kernel.cout)}"
        )
    cols = _im2col(x, kernel.kh, kernel.kw, stride, pads)
    g2d = upstream.reshape(-1, kernel.cout)
    dw = (cols.T @ g2d).reshape(kernel.weights.shape)
    db = np.sum(g2d, axis=0, dtype=np.float64).astype(g2d.dtype)
    dcols = g2d @ kernel.weights.reshape(-1, kernel.cout).T.astype(g2d.dtype, copy=False)
    dx = _col2im(dcols, x.shape, kernel.kh, kernel.kw, stride, pads)
    return dx, ConvKernel(weights=dw, bias=db)


def transposed_conv2d(x: np.ndarray, kernel: ConvKernel, stride: int = 2) -> np.ndarray:
    """Transposed convolution (learnable upsampling): spatial dims grow by
    `stride`.

    Defined as the exact adjoint of the matching same-padding conv2d: with
    zero bias, <conv2d(z, k), y> == <z, transposed_conv2d(y, k_swapped)> for
    all z, y, where k_swapped exchanges the kernel's in/out channel axes.
    """
    x = _check_tensor4(x)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.shape[3] != kernel.cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {kernel.cin}")
    t, h, w, _ = x.shape
    th, tw = stride * h, stride * w
    # Adjoint of the virtual conv (t, th, tw, cout) -> (t, h, w, cin).
    kv = np.ascontiguousarray(kernel.weights.transpose(0, 1, 3, 2))  # (kh, kw, cout, cin)
    oh, ow, pads = _conv_geometry(th, tw, kernel.kh, kernel.kw, stride, "same")
    if (oh, ow) != (h, w):  # pragma: no cover - geometry identity for same padding
        raise ShapeError("same-padding geometry did not invert cleanly")
    dcols = x.reshape(-1, kernel.cin) @ kv.reshape(-1, kernel.cin).T.astype(x.dtype, copy=False)
    out = _col2im(dcols, (t, th, tw, kernel.cout), kernel.kh, kernel.kw, stride, pads)
    out += kernel.bias.astype(x.dtype, copy=False)
    return out


def transposed_conv2d_grad(
    x: np.ndarray,
    kernel: ConvKernel,
    upstream: np.ndarray,
    stride: int = 2,
) -> tuple[np.ndarray, ConvKernel]:
    """Gradients of transposed_conv2d contracted with `upstream`.

    The input gradient is the virtual conv run forward on `upstream`, and the
    kernel gradient contracts the same patch matrix against x, so one im2col
    of the (large) upstream serves both.
    """
    x = _check_tensor4(x)
    upstream = _check_tensor4(upstream, "upstream")
    t, h, w, _ = x.shape
    if upstream.shape != (t, stride * h, stride * w, kernel.cout):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match transposed-conv output "
            f"{(t, stride * h, stride * w, kernel.cout)}"
        )
    kh, kw = kernel.kh, kernel.kw
    _, _, pads = _conv_geometry(stride * h, stride * w, kh, kw, stride, "same")
    cols = _im2col(upstream, kh, kw, stride, pads)  # (t*h*w, kh*kw*cout)
    kv2d = kernel.weights.transpose(0, 1, 3, 2).reshape(-1, kernel.cin)
    dx = (cols @ kv2d.astype(upstream.dtype, copy=False)).reshape(t, h, w, kernel.cin)
    dkv = cols.T @ x.reshape(-1, kernel.cin)
    dw = np.ascontiguousarray(
        dkv.reshape(kh, kw, kernel.cout, kernel.cin).transpose(0, 1, 3, 2)
    )
    db = np.sum(upstream, axis=(0, 1, 2), dtype=np.float64).astype(upstream.dtype)
    return dx, ConvKernel(weights=dw, bias=db)


def resize_nearest(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the spatial axes: output pixel (i, j) copies
    input pixel (floor(i*h/target_h), floor(j*w/target_w))."""
    x = _check_tensor4(x)
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1")
    _, h, w, _ = x.shape
    if (h, w) == (target_h, target_w):
        return x.copy()
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    return x[:, rows][:, :, cols]


def resize_nearest_grad(upstream: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Adjoint of resize_nearest: scatter-add output gradients onto sources."""
    upstream = _check_tensor4(upstream, "upstream")
    t, th, tw, c = upstream.shape
    if (src_h, src_w) == (th, tw):
        return upstream.copy()
    rows = (np.arange(th) * src_h) // th
    cols = (np.arange(tw) * src_w) // tw
    tmp = np.zeros((t, src_h, tw, c), dtype=upstream.dtype)
    np.add.at(tmp, (slice(None), rows), upstream)
    dx = np.zeros((t, src_h, src_w, c), dtype=upstream.dtype)
    np.add.at(dx, (slice(None), slice(None), cols), tmp)
    return dx


def _layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Forward pass returning (out, xhat, inv) so backprop skips recomputing
    the per-step statistics. Reductions accumulate in float64."""
    m1 = np.mean(x, axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    m2 = np.mean(x * x, axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    var = np.maximum(m2 - m1 * m1, 0.0)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - m1.astype(x.dtype)) * inv
    out = xhat * np.asarray(gain, dtype=x.dtype) + np.asarray(bias, dtype=x.dtype)
    return out, xhat, inv


def _layer_norm_bwd(xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray, upstream: np.ndarray):
    dgain = np.sum(upstream * xhat, axis=(0, 1, 2), dtype=np.float64).astype(xhat.dtype)
    dbias = np.sum(upstream, axis=(0, 1, 2), dtype=np.float64).astype(xhat.dtype)
    dxhat = upstream * np.asarray(gain, dtype=xhat.dtype)
    m1 = np.mean(dxhat, axis=(1, 2, 3), keepdims=True, dtype=np.float64).astype(xhat.dtype)
    m2 = np.mean(dxhat * xhat, axis=(1, 2, 3), keepdims=True, dtype=np.float64).astype(xhat.dtype)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dgain, dbias


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYER_NORM_EPS
) -> np.ndarray:
    """Normalize each time step to zero mean / unit variance over (h, w, c),
    then scale and shift per channel."""
    x = _check_tensor4(x)
    out, _, _ = _layer_norm_fwd(x, gain, bias, eps)
    return out


def layer_norm_grad(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    upstream: np.ndarray,
    eps: float = LAYER_NORM_EPS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of layer_norm w.r.t. input, gain, and bias."""
    x = _check_tensor4(x)
    upstream = _check_tensor4(upstream, "upstream")
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    _, xhat, inv = _layer_norm_fwd(x, gain, bias, eps)
    return _layer_norm_bwd(xhat, inv, gain, upstream)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0)


@dataclass
class AdamState:
    """Per-parameter ADAM accumulator state."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        z = np.zeros_like(np.asarray(params), dtype=np.float64)
        return cls(step=0, m=z.copy(), v=z.copy(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected ADAM update; pure, returns the new parameter array
    and the advanced state."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"param/grad/state shapes differ: {params.shape}, {grads.shape}, {state.m.shape}"
        )
    step = state.step + 1
    g = grads.astype(np.float64, copy=False)
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = m / (1.0 - state.beta1**step)
    vhat = v / (1.0 - state.beta2**step)
    new = params - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return new.astype(params.dtype), AdamState(
        step=step, m=m, v=v, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
