"""Stereo disparity estimation with spatial pyramid pooling and 3D cost filtering, in plain numpy."""
__version__ = "0.1.0"

from .cost_regularization import CameraCalib, build_cost_volume, depth_from_disparity, disparity_regression
from .model import DisparityOutput, PSMNet
from .psm_blocks import ConfigError, NetworkConfig
from .stereo_io import StereoSample, generate_stereogram, load_dataset
from .training import LossWeights, TrainConfig, TrainingDiverged, train

__all__ = [
    "CameraCalib", "ConfigError", "DisparityOutput", "LossWeights", "NetworkConfig", "PSMNet",
    "StereoSample", "TrainConfig", "TrainingDiverged", "build_cost_volume", "depth_from_disparity",
    "disparity_regression", "generate_stereogram", "load_dataset", "train",
]
