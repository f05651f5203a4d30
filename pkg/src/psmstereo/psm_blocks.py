"""Unary feature extraction: cascaded 3x3 stem, dilated residual stages and SPP fusion."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .tensor_core import (
    BatchNorm,
    Conv2d,
    Module,
    Tensor,
    add,
    avg_pool2d,
    concat,
    relu,
    upsample_bilinear2d,
)

REGULARIZERS = ("basic", "stacked_hourglass")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    stem_channels: int = 8
    stage_blocks: tuple = (1, 1, 1, 1)
    stage_channels: tuple = (8, 8, 16, 16)
    dilations: tuple = (1, 1, 2, 4)
    spp_scales: tuple = (8, 4, 2, 1)
    spp_reduced_channels: int = 4
    fusion_channels: int = 16
    skip_stages: tuple = (2, 4)
    max_disparity: int = 16
    regularizer: str = "stacked_hourglass"
    reg_channels: int = 16
    loss_weights: tuple = (0.5, 0.7, 1.0)
    dtype: str = "float64"

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                setattr(self, f.name, tuple(val))

    def validate(self) -> "NetworkConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.stem_channels >= 1, "stem_channels must be >= 1")
        need(len(self.stage_blocks) == 4 and min(self.stage_blocks) >= 1,
             "stage_blocks needs 4 entries, each >= 1")
        need(len(self.stage_channels) == 4 and min(self.stage_channels) >= 1,
             "stage_channels needs 4 positive entries")
        need(len(self.dilations) == 4, "dilations needs 4 entries")
        need(self.dilations[0] == 1 and self.dilations[1] == 1, "dilations of conv1_x and conv2_x must be 1")
        need(min(self.dilations) >= 1, "dilations must be >= 1")
        need(all(s >= 1 for s in self.spp_scales), "spp_scales must be >= 1")
        need(all(a > b for a, b in zip(self.spp_scales, self.spp_scales[1:])),
             "spp_scales must be strictly decreasing")
        need(self.spp_reduced_channels >= 1 and self.fusion_channels >= 1,
             "spp_reduced_channels and fusion_channels must be >= 1")
        need(all(s in (2, 3, 4) for s in self.skip_stages),
             "skip_stages entries must be in 2..4 (quarter-resolution stages)")
        need(self.skip_stages or self.spp_scales, "need at least one skip stage or SPP scale")
        need(self.max_disparity >= 4 and self.max_disparity % 4 == 0,
             f"max_disparity must be a positive multiple of 4, got {self.max_disparity}")
        need(self.regularizer in REGULARIZERS, f"regularizer must be one of {REGULARIZERS}")
        need(self.reg_channels >= 1, "reg_channels must be >= 1")
        need(len(self.loss_weights) == 3 and min(self.loss_weights) >= 0 and max(self.loss_weights) > 0,
             "loss_weights needs 3 non-negative values, at least one positive")
        need(self.dtype in ("float64", "float32"), "dtype must be float64 or float32")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def spp_concat_channels(self) -> int:
        """Channels entering the fusion conv: skip stages plus one branch per pooling scale."""
        return (sum(self.stage_channels[s - 1] for s in self.skip_stages)
                + len(self.spp_scales) * self.spp_reduced_channels)


def _convbn(cin, cout, rng, dtype, stride=1, dilation=1, kernel=3):
    return Conv2d(cin, cout, kernel, rng, stride=stride, dilation=dilation, dtype=dtype), BatchNorm(cout, dtype=dtype)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus shortcut; no ReLU after the sum."""

    def __init__(self, cin, cout, rng, stride=1, dilation=1, dtype=np.float64):
        self.conv1, self.bn1 = _convbn(cin, cout, rng, dtype, stride, dilation)
        self.conv2, self.bn2 = _convbn(cout, cout, rng, dtype, 1, dilation)
        self.proj: Optional[Conv2d] = None
        self.proj_bn: Optional[BatchNorm] = None
        if stride != 1 or cin != cout:
            self.proj, self.proj_bn = _convbn(cin, cout, rng, dtype, stride, 1, kernel=1)

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        short = x if self.proj is None else self.proj_bn(self.proj(x))
        return add(y, short)


class SPPBranch(Module):
    def __init__(self, scale, cin, cout, rng, dtype):
        self.scale = scale
        self.conv, self.bn = _convbn(cin, cout, rng, dtype, kernel=1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        pooled = avg_pool2d(x, self.scale, self.scale)
        y = relu(self.bn(self.conv(pooled)))
        return upsample_bilinear2d(y, h, w)


class FeatureExtractor(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        dt = config.np_dtype
        c0 = config.stem_channels
        self.stem = [
            *_convbn(3, c0, rng, dt, stride=2),
            *_convbn(c0, c0, rng, dt),
            *_convbn(c0, c0, rng, dt),
        ]
        self.stages: list = []
        cin = c0
        for i, (n, cout, dil) in enumerate(zip(config.stage_blocks, config.stage_channels, config.dilations)):
            stride = 2 if i == 1 else 1
            blocks = []
            for b in range(n):
                blocks.append(ResidualBlock(cin, cout, rng, stride if b == 0 else 1, dil, dt))
                cin = cout
            self.stages.append(_Stage(blocks))
        c4 = config.stage_channels[3]
        self.branches = [SPPBranch(s, c4, config.spp_reduced_channels, rng, dt) for s in config.spp_scales]
        self.fuse1, self.fuse1_bn = _convbn(config.spp_concat_channels, config.fusion_channels, rng, dt)
        self.fuse2 = Conv2d(config.fusion_channels, config.fusion_channels, 1, rng, dtype=dt)

    @property
    def out_channels(self) -> int:
        return self.config.fusion_channels

    def backbone(self, image: Tensor) -> list:
        """Outputs of conv1_x..conv4_x; conv1_x is at half resolution, the rest at quarter."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected image batch [B,3,H,W], got {image.shape}")
        H, W = image.shape[2:]
        if H % 4 or W % 4:
            raise ValueError(f"image size {H}x{W} is not divisible by 4; pad it (e.g. infer --pad)")
        x = image
        for conv, bn in zip(self.stem[0::2], self.stem[1::2]):
            x = relu(bn(conv(x)))
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def spp_forward(self, stage_outputs: list) -> Tensor:
        c4 = stage_outputs[3]
        h, w = c4.shape[2:]
        for s in self.config.spp_scales:
            if s > min(h, w):
                raise ValueError(f"SPP scale {s} exceeds the {h}x{w} quarter-resolution feature map")
        parts = [stage_outputs[s - 1] for s in self.config.skip_stages]
        parts += [branch(c4) for branch in self.branches]
        x = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        x = relu(self.fuse1_bn(self.fuse1(x)))
        return self.fuse2(x)

    def forward(self, image: Tensor) -> Tensor:
        return self.spp_forward(self.backbone(image))


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def build_feature_extractor(config: NetworkConfig, seed: int = 0) -> FeatureExtractor:
    config.validate()
    ext = FeatureExtractor(config, np.random.default_rng(seed))
    ext.assign_names()
    return ext


def extract_features(extractor: FeatureExtractor, image: Tensor) -> Tensor:
    """[B,3,H,W] -> [B,fusion_channels,H/4,W/4]."""
    return extractor(image)
