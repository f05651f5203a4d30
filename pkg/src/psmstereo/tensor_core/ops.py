"""Differentiable primitives other than convolution."""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), bw, "add")


def negate(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), "negate")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a blown-up forward pass stays visible to the caller
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype, copy=False),
                          (x,), lambda g: (g * mask,), "relu")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ValueError(
                f"concat along axis {axis}: shape {t.shape} does not match {ref} off that axis"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax),
                          tuple(tensors), bw, "concat")


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw, "softmax")


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Mean over ``kernel x kernel`` windows; trailing partial windows are dropped."""
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    B, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ValueError(f"avg_pool2d kernel {kernel} larger than input {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    scale = 1.0 / (kernel * kernel)
    if stride == kernel:
        xs = x.data[:, :, : Ho * kernel, : Wo * kernel].reshape(B, C, Ho, kernel, Wo, kernel)
        out = xs.mean(axis=(3, 5))

        def bw(g):
            gx = np.zeros_like(x.data)
            gx[:, :, : Ho * kernel, : Wo * kernel] = np.broadcast_to(
                (g * scale)[:, :, :, None, :, None], (B, C, Ho, kernel, Wo, kernel)
            ).reshape(B, C, Ho * kernel, Wo * kernel)
            return (gx,)
    else:
        out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                out += x.data[:, :, i: i + stride * (Ho - 1) + 1: stride,
                              j: j + stride * (Wo - 1) + 1: stride]
        out *= scale

        def bw(g):
            gx = np.zeros_like(x.data)
            gs = g * scale
            for i in range(kernel):
                for j in range(kernel):
                    gx[:, :, i: i + stride * (Ho - 1) + 1: stride,
                       j: j + stride * (Wo - 1) + 1: stride] += gs
            return (gx,)

    return Tensor.from_op(out, (x,), bw, "avg_pool2d")


@lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    m.setflags(write=False)
    return m


def _resize_axes(x: Tensor, sizes: Sequence[int], op: str) -> Tensor:
    nd = len(sizes)
    axes = list(range(x.ndim - nd, x.ndim))
    mats = [_interp_matrix(x.shape[a], s).astype(x.dtype, copy=False) for a, s in zip(axes, sizes)]

    def apply(arr, transpose):
        for a, m in zip(axes, mats):
            if m.shape[0] == m.shape[1]:
                continue  # align-corners resize to the same length is the identity
            mm = m if transpose else m.T
            arr = np.moveaxis(np.moveaxis(arr, a, -1) @ mm, -1, a)
        return np.ascontiguousarray(arr)

    return Tensor.from_op(apply(x.data, False), (x,), lambda g: (apply(g, True),), op)


def upsample_bilinear2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear2d expects [B,C,H,W], got {x.shape}")
    return _resize_axes(x, (out_h, out_w), "upsample_bilinear2d")


def upsample_trilinear3d(x: Tensor, out_d: int, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"upsample_trilinear3d expects [B,C,D,H,W], got {x.shape}")
    return _resize_axes(x, (out_d, out_h, out_w), "upsample_trilinear3d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    In training mode the batch statistics are used and the running buffers are
    updated in place (biased variance); in eval mode the running buffers are used.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g = gamma.data.reshape(bshape)
    b = beta.data.reshape(bshape)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C)

        def bw(go):
            dgamma = (go * xhat).sum(axis=axes)
            dbeta = go.sum(axis=axes)
            dxhat = go * g
            dx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv

        def bw(go):
            return go * g * inv, (go * xhat).sum(axis=axes), go.sum(axis=axes)

    return Tensor.from_op(xhat * g + b, (x, gamma, beta), bw, "batch_norm")
