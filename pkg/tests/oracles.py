"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for n in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u * dilation, j * stride + v * dilation] * w[k, c, u, v]
                    out[n, k, i, j] = acc + (0.0 if b is None else b[k])
    return out


def conv3d(x, w, b=None, stride=1, padding=0):
    B, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    p = padding
    xp = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p))
    xp[:, :, p:p + D, p:p + H, p:p + W] = x
    Do, Ho, Wo = ((n + 2 * p - k) // stride + 1 for n, k in ((D, kd), (H, kh), (W, kw)))
    out = np.zeros((B, K, Do, Ho, Wo))
    for n, k, a, i, j in itertools.product(range(B), range(K), range(Do), range(Ho), range(Wo)):
        acc = 0.0
        for c, t, u, v in itertools.product(range(C), range(kd), range(kh), range(kw)):
            acc += xp[n, c, a * stride + t, i * stride + u, j * stride + v] * w[k, c, t, u, v]
        out[n, k, a, i, j] = acc + (0.0 if b is None else b[k])
    return out


def cost_volume(left, right, max_disparity):
    B, C, H, W = left.shape
    levels = max_disparity // 4
    out = np.zeros((B, 2 * C, levels, H, W))
    for n, c, d, y, x in itertools.product(range(B), range(C), range(levels), range(H), range(W)):
        out[n, c, d, y, x] = left[n, c, y, x]
        out[n, C + c, d, y, x] = right[n, c, y, x - d] if x - d >= 0 else 0.0
    return out


def avg_pool2d(x, k, s):
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.zeros((B, C, Ho, Wo))
    for n, c, i, j in itertools.product(range(B), range(C), range(Ho), range(Wo)):
        total = 0.0
        for u in range(k):
            for v in range(k):
                total += x[n, c, i * s + u, j * s + v]
        out[n, c, i, j] = total / (k * k)
    return out


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar f at every entry of x (x is modified and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def soft_argmin(costs):
    """Softmax-weighted disparity for a single pixel, written with plain floats."""
    e = [np.exp(-c) for c in costs]
    z = sum(e)
    return sum(d * v for d, v in enumerate(e)) / z
