"""Concatenation cost volume, 3D CNN regularizers and soft-argmin disparity regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    BatchNorm,
    Conv3d,
    ConvTranspose3d,
    Module,
    Tensor,
    add,
    mul,
    negate,
    relu,
    reshape,
    softmax,
    sum as tsum,
    upsample_trilinear3d,
)


def build_cost_volume(left: Tensor, right: Tensor, max_disparity: int) -> Tensor:
    """Stack ``left`` with ``right`` shifted by each quarter-resolution disparity.

    Output is [B, 2C, D/4, H, W]; columns shifted in from outside the frame are zero.
    """
    if left.shape != right.shape or left.ndim != 4:
        raise ValueError(f"left/right features must share a [B,C,H,W] shape, got {left.shape} and {right.shape}")
    if max_disparity % 4:
        raise ValueError(f"max_disparity must be a multiple of 4, got {max_disparity}")
    B, C, H, W = left.shape
    levels = max_disparity // 4
    vol = np.zeros((B, 2 * C, levels, H, W), dtype=left.dtype)
    vol[:, :C] = left.data[:, :, None]
    for d in range(min(levels, W)):
        vol[:, C:, d, :, d:] = right.data[:, :, :, : W - d]

    def bw(g):
        gl = g[:, :C].sum(axis=2)
        gr = np.zeros_like(right.data)
        for d in range(min(levels, W)):
            gr[:, :, :, : W - d] += g[:, C:, d, :, d:]
        return gl, gr

    return Tensor.from_op(vol, (left, right), bw, "build_cost_volume")


def _convbn3d(cin, cout, rng, dtype, stride=1):
    return Conv3d(cin, cout, 3, rng, stride=stride, dtype=dtype), BatchNorm(cout, dtype=dtype)


class ConvBNReLU3d(Module):
    def __init__(self, cin, cout, rng, dtype, stride=1, activate=True):
        self.conv, self.bn = _convbn3d(cin, cout, rng, dtype, stride)
        self.activate = activate

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y


class Residual3d(Module):
    def __init__(self, channels, rng, dtype):
        self.a = ConvBNReLU3d(channels, channels, rng, dtype)
        self.b = ConvBNReLU3d(channels, channels, rng, dtype, activate=False)

    def forward(self, x):
        return add(self.b(self.a(x)), x)


class CostHead(Module):
    """conv-BN-ReLU then a plain conv down to one cost channel."""

    def __init__(self, channels, rng, dtype):
        self.a = ConvBNReLU3d(channels, channels, rng, dtype)
        self.out = Conv3d(channels, 1, 3, rng, dtype=dtype)

    def forward(self, x):
        return self.out(self.a(x))


class BasicRegularizer(Module):
    """Twelve 3x3x3 convs: 2 entry, 4 residual blocks of 2, 2 in the head."""

    num_outputs = 1

    def __init__(self, in_channels, channels, rng, dtype=np.float64):
        self.entry = [ConvBNReLU3d(in_channels, channels, rng, dtype), ConvBNReLU3d(channels, channels, rng, dtype)]
        self.blocks = [Residual3d(channels, rng, dtype) for _ in range(4)]
        self.head = CostHead(channels, rng, dtype)

    def forward(self, volume: Tensor) -> list:
        x = volume
        for layer in self.entry:
            x = layer(x)
        for block in self.blocks:
            x = block(x)
        return [self.head(x)]


class HourglassUnit(Module):
    """Encoder halves (D,H,W) twice with stride-2 convs; decoder restores with transposed convs."""

    def __init__(self, channels, rng, dtype):
        c2 = 2 * channels
        self.down1 = ConvBNReLU3d(channels, c2, rng, dtype, stride=2)
        self.enc1 = ConvBNReLU3d(c2, c2, rng, dtype)
        self.down2 = ConvBNReLU3d(c2, c2, rng, dtype, stride=2)
        self.enc2 = ConvBNReLU3d(c2, c2, rng, dtype)
        self.up1 = ConvTranspose3d(c2, c2, rng, dtype)
        self.up1_bn = BatchNorm(c2, dtype=dtype)
        self.up2 = ConvTranspose3d(c2, channels, rng, dtype)
        self.up2_bn = BatchNorm(channels, dtype=dtype)
        self.shape_trace: list = []

    def forward(self, x: Tensor) -> Tensor:
        dims = x.shape[2:]
        if any(n % 4 for n in dims):
            raise ValueError(
                f"hourglass needs (D/4, H/4, W/4) divisible by 4 for two halvings, got {dims}; "
                "use max_disparity and image sizes that are multiples of 16"
            )
        skip = self.enc1(self.down1(x))
        y = self.enc2(self.down2(skip))
        z = relu(add(self.up1_bn(self.up1(y)), skip))
        out = self.up2_bn(self.up2(z))
        self.shape_trace = [dims, skip.shape[2:], y.shape[2:], z.shape[2:], out.shape[2:]]
        return out


class StackedHourglass(Module):
    num_outputs = 3

    def __init__(self, in_channels, channels, rng, dtype=np.float64):
        self.entry = [ConvBNReLU3d(in_channels, channels, rng, dtype), ConvBNReLU3d(channels, channels, rng, dtype)]
        self.entry_res = Residual3d(channels, rng, dtype)
        self.units = [HourglassUnit(channels, rng, dtype) for _ in range(3)]
        self.heads = [CostHead(channels, rng, dtype) for _ in range(3)]

    def forward(self, volume: Tensor) -> list:
        x = volume
        for layer in self.entry:
            x = layer(x)
        base = self.entry_res(x)
        costs = []
        x = base
        for unit, head in zip(self.units, self.heads):
            x = add(unit(x), base)
            costs.append(head(x))
        return costs


def build_regularizer(kind: str, in_channels: int, channels: int, rng, dtype=np.float64) -> Module:
    if kind == "basic":
        return BasicRegularizer(in_channels, channels, rng, dtype)
    if kind == "stacked_hourglass":
        return StackedHourglass(in_channels, channels, rng, dtype)
    raise ValueError(f"unknown regularizer {kind!r}")


def regularize_basic(volume: Tensor, params: BasicRegularizer) -> Tensor:
    return params(volume)[0]


def regularize_hourglass(volume: Tensor, params: StackedHourglass) -> list:
    return params(volume)


def disparity_regression(cost: Tensor, max_disparity: int, height: int, width: int) -> Tensor:
    """Soft-argmin over disparities 0..D-1 of the trilinearly upsampled, negated cost.

    ``cost`` is [B,1,D',H',W']; returns [B,H,W].
    """
    if cost.ndim != 5 or cost.shape[1] != 1:
        raise ValueError(f"cost must be [B,1,D,H,W], got {cost.shape}")
    B = cost.shape[0]
    up = upsample_trilinear3d(cost, max_disparity, height, width)
    prob = softmax(negate(reshape(up, (B, max_disparity, height, width))), axis=1)
    disp = np.arange(max_disparity, dtype=cost.dtype).reshape(1, max_disparity, 1, 1)
    out = tsum(mul(prob, disp), axis=1)
    # a saturated softmax can overshoot [0, D-1] by a few ulps; shift back without touching the gradient
    overshoot = np.clip(out.data, 0, max_disparity - 1) - out.data
    return add(out, overshoot) if overshoot.any() else out


@dataclass(frozen=True)
class CameraCalib:
    focal_length: float
    baseline: float

    def __post_init__(self):
        if self.focal_length <= 0 or self.baseline <= 0:
            raise ValueError("focal_length and baseline must be positive")


def depth_from_disparity(disparity, calib: CameraCalib):
    """Depth f*B/d in meters plus a validity mask; d <= 0 maps to +inf and is masked out."""
    d = disparity.data if isinstance(disparity, Tensor) else np.asarray(disparity, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    depth = np.full(d.shape, np.inf)
    depth[valid] = calib.focal_length * calib.baseline / d[valid]
    return depth, valid
