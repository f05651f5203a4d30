import numpy as np

from psmstereo.psm_blocks import NetworkConfig
from psmstereo.stereo_io import generate_stereogram, random_stereogram_spec


def tiny_net(regularizer="stacked_hourglass", dtype="float64", **kw):
    """A network small enough to train for a few steps inside a unit test."""
    base = dict(stem_channels=4, stage_channels=(4, 4, 6, 6), dilations=(1, 1, 2, 2),
                spp_scales=(2, 1), spp_reduced_channels=2, fusion_channels=4,
                max_disparity=16, regularizer=regularizer, reg_channels=4, dtype=dtype)
    base.update(kw)
    return NetworkConfig(**base).validate()


def toy_samples(n=3, h=16, w=32, max_disparity=16, seed=0):
    rng = np.random.default_rng(seed)
    return [generate_stereogram(random_stereogram_spec(h, w, max_disparity, rng), seed=[seed, i],
                                max_disparity=max_disparity) for i in range(n)]
