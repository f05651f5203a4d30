"""2D/3D cross-correlation and 3D transposed convolution via im2col."""
from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def _tuple(v, nd: int) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * nd


def _out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x: np.ndarray, padding: tuple) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _im2col(xp: np.ndarray, kernel: tuple, stride: tuple, dilation: tuple, out: tuple) -> np.ndarray:
    """Rows are output positions (B, *out), columns are (C, *kernel)."""
    nd = len(kernel)
    eff = tuple(d * (k - 1) + 1 for k, d in zip(kernel, dilation))
    win = sliding_window_view(xp, eff, axis=tuple(range(2, 2 + nd)))
    sl = (slice(None), slice(None))
    sl += tuple(slice(0, s * (o - 1) + 1, s) for s, o in zip(stride, out))
    sl += tuple(slice(None, None, d) for d in dilation)
    win = win[sl]  # (B, C, *out, *kernel)
    B, C = xp.shape[:2]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return win.transpose(order).reshape(B * int(np.prod(out)), C * int(np.prod(kernel)))


def _col2im(cols: np.ndarray, padded_shape: tuple, kernel: tuple, stride: tuple,
            dilation: tuple, out: tuple) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the padded input."""
    nd = len(kernel)
    B, C = padded_shape[:2]
    cols = cols.reshape((B,) + out + (C,) + kernel)
    # -> (*kernel, B, C, *out) so each kernel offset is one contiguous block
    order = tuple(range(2 + nd, 2 + 2 * nd)) + (0, 1 + nd) + tuple(range(1, 1 + nd))
    cols = cols.transpose(order)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for idx in itertools.product(*(range(k) for k in kernel)):
        sl = (slice(None), slice(None)) + tuple(
            slice(i * d, i * d + s * (o - 1) + 1, s)
            for i, d, s, o in zip(idx, dilation, stride, out)
        )
        xp[sl] += cols[idx]
    return xp


def _unpad(xp: np.ndarray, padding: tuple) -> np.ndarray:
    if not any(padding):
        return xp
    sl = (slice(None), slice(None)) + tuple(slice(p, xp.shape[2 + i] - p) for i, p in enumerate(padding))
    return xp[sl]


def _convnd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride, padding, dilation,
            nd: int, op: str) -> Tensor:
    if x.ndim != nd + 2 or weight.ndim != nd + 2:
        raise ValueError(f"{op}: expected {nd + 2}-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"{op}: input channels {x.shape[1]} (input shape {x.shape}) do not match "
            f"weight channels {weight.shape[1]} (weight shape {weight.shape})"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match {weight.shape[0]} filters")
    stride, padding, dilation = _tuple(stride, nd), _tuple(padding, nd), _tuple(dilation, nd)
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ValueError(f"{op}: need stride >= 1, dilation >= 1, padding >= 0")
    kernel = weight.shape[2:]
    spatial = x.shape[2:]
    for n, k, p, d in zip(spatial, kernel, padding, dilation):
        if n + 2 * p < d * (k - 1) + 1:
            raise ValueError(f"{op}: input {x.shape} too small for kernel {kernel} with dilation {dilation}")
    out = tuple(_out_size(n, k, s, p, d) for n, k, s, p, d in zip(spatial, kernel, stride, padding, dilation))
    B, K = x.shape[0], weight.shape[0]
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kernel, stride, dilation, out)
    wmat = weight.data.reshape(K, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(np.moveaxis(y.reshape((B,) + out + (K,)), -1, 1))
    pshape = xp.shape

    def bw(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, K)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_col2im(g2 @ wmat, pshape, kernel, stride, dilation, out), padding)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, parents, bw, op)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlate ``x [B,C,H,W]`` with ``weight [K,C,kh,kw]``."""
    return _convnd(x, weight, bias, stride, padding, dilation, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlate ``x [B,C,D,H,W]`` with ``weight [K,C,kd,kh,kw]``."""
    return _convnd(x, weight, bias, stride, padding, dilation, 3, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2, padding: int = 1, output_padding: int = 1) -> Tensor:
    """Transposed 3D convolution, ``weight [C_in, C_out, kd, kh, kw]``.

    Forward equals the input-gradient of ``conv3d`` with the same weight, stride
    and padding. The defaults (k=3, stride 2, padding 1, output_padding 1)
    exactly double every spatial dim.
    """
    nd = 3
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv_transpose3d: expected 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose3d: input channels {x.shape[1]} (input shape {x.shape}) do not match "
            f"weight input channels {weight.shape[0]} (weight shape {weight.shape})"
        )
    stride, padding, opad = _tuple(stride, nd), _tuple(padding, nd), _tuple(output_padding, nd)
    if any(o >= s for o, s in zip(opad, stride)):
        raise ValueError("conv_transpose3d: output_padding must be smaller than stride")
    dilation = (1,) * nd
    kernel = weight.shape[2:]
    B, Cin = x.shape[:2]
    Cout = weight.shape[1]
    spatial = x.shape[2:]
    out = tuple((n - 1) * s - 2 * p + k + op for n, s, p, k, op in zip(spatial, stride, padding, kernel, opad))
    if min(out) < 1:
        raise ValueError(f"conv_transpose3d: non-positive output size {out}")
    padded = (B, Cout) + tuple(o + 2 * p for o, p in zip(out, padding))
    wmat = weight.data.reshape(Cin, -1)
    x2 = np.moveaxis(x.data, 1, -1).reshape(-1, Cin)
    y = _unpad(_col2im(x2 @ wmat, padded, kernel, stride, dilation, spatial), padding)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data.reshape((1, Cout) + (1,) * nd)

    def bw(g):
        cols = _im2col(_pad(g, padding), kernel, stride, dilation, spatial)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(np.moveaxis((cols @ wmat.T).reshape((B,) + spatial + (Cin,)), -1, 1))
        if weight.requires_grad:
            gw = (x2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, parents, bw, "conv_transpose3d")


def conv_output_shape(spatial: Sequence[int], kernel: Sequence[int], stride=1, padding=0, dilation=1) -> tuple:
    nd = len(spatial)
    stride, padding, dilation = _tuple(stride, nd), _tuple(padding, nd), _tuple(dilation, nd)
    return tuple(_out_size(n, k, s, p, d) for n, k, s, p, d in zip(spatial, kernel, stride, padding, dilation))
