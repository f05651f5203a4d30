"""Minimal numpy tensor engine with reverse-mode autodiff."""
from .adam import ADAM_EPS, Adam, adam_step, zero_grad
from .conv import conv2d, conv3d, conv_transpose3d
from .module import BatchNorm, Conv2d, Conv3d, ConvTranspose3d, Module
from .ops import (
    add,
    avg_pool2d,
    batch_norm,
    concat,
    mean,
    mul,
    negate,
    relu,
    reshape,
    softmax,
    sum,
    upsample_bilinear2d,
    upsample_trilinear3d,
)
from .tensor import DEFAULT_DTYPE, Graph, Parameter, Tensor, backward, no_grad, record_ops

__all__ = [
    "ADAM_EPS", "Adam", "BatchNorm", "Conv2d", "Conv3d", "ConvTranspose3d", "DEFAULT_DTYPE",
    "Graph", "Module", "Parameter", "Tensor", "adam_step", "add", "avg_pool2d", "backward",
    "batch_norm", "concat", "conv2d", "conv3d", "conv_transpose3d", "mean", "mul", "negate",
    "no_grad", "record_ops", "relu", "reshape", "softmax", "sum", "upsample_bilinear2d",
    "upsample_trilinear3d", "zero_grad",
]
