"""Neural-network primitives on :class:`~stndet.tensor.Tensor`.

Images are NCHW. All ops keep the input dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def _out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    ``weight`` is (c_out, c_in, kh, kw); ``bias`` is (c_out,) or None.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects a 4-D input and 4-D weight")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    oh, ow = _out_dim(h, kh, stride, padding), _out_dim(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be {oh}x{ow}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, oh, ow, c, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over k x k windows; gradient goes to the first row-major maximum."""
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    oh, ow = _out_dim(h, k, stride, 0), _out_dim(w, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(arg == idx, g, 0.0)
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def _adaptive_matrix(size: int, out: int, dtype) -> np.ndarray:
    mat = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over windows [floor(i*H/oh), ceil((i+1)*H/oh)) per axis.

    The window mean is separable, so the op is ``Ph @ X @ Pw.T``.
    """
    n, c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError("adaptive pool output dims must be positive")
    if out_h > h or out_w > w:
        raise ValueError(f"adaptive pool output {out_h}x{out_w} exceeds input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x * 1.0
    ph = _adaptive_matrix(h, out_h, x.dtype)
    pw = _adaptive_matrix(w, out_w, x.dtype)
    out = ph @ x.data @ pw.T
    return Tensor._make(out, (x,), lambda g: (ph.T @ g @ pw,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (n, in_features)."""
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: in_features {x.shape[1]} != weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (targets are constants)."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return Tensor._make(out, (logits,), lambda g: (g * (_sigmoid_np(z) - t),))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
