from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost_regularization import build_cost_volume, build_regularizer, disparity_regression
from .psm_blocks import FeatureExtractor, NetworkConfig
from .tensor_core import Module, Tensor


@dataclass
class DisparityOutput:
    maps: list  # one [B,H,W] Tensor per regularizer output, coarse-to-final

    @property
    def final(self) -> Tensor:
        return self.maps[-1]


class PSMNet(Module):
    """Shared-weight feature extraction, cost volume, 3D regularization, regression."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.features = FeatureExtractor(config, rng)
        self.regularizer = build_regularizer(
            config.regularizer, 2 * config.fusion_channels, config.reg_channels, rng, config.np_dtype
        )
        self.assign_names()

    def forward(self, left: Tensor, right: Tensor) -> DisparityOutput:
        if left.shape != right.shape:
            raise ValueError(f"left {left.shape} and right {right.shape} images differ in shape")
        H, W = left.shape[2:]
        fl = self.features(left)
        fr = self.features(right)
        volume = build_cost_volume(fl, fr, self.config.max_disparity)
        costs = self.regularizer(volume)
        return DisparityOutput([disparity_regression(c, self.config.max_disparity, H, W) for c in costs])
