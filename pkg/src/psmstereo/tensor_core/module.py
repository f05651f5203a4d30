"""Layer containers: parameter registry, BN buffers, train/eval switch."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .conv import conv2d, conv3d, conv_transpose3d
from .ops import batch_norm
from .tensor import DEFAULT_DTYPE, Parameter, Tensor


class Module:
    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            else:
                yield from val.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, arr in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", arr
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, bias: bool = False,
                 dtype=DEFAULT_DTYPE):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = Parameter(_he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, dtype=DEFAULT_DTYPE):
        if padding is None:
            padding = (kernel - 1) // 2
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_he_normal(rng, (cout, cin) + (kernel,) * 3, cin * kernel ** 3, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    """k=3, stride 2, padding 1, output_padding 1: doubles D, H and W."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(_he_normal(rng, (cin, cout, 3, 3, 3), cin * 27, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, None, stride=2, padding=1, output_padding=1)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.momentum, self.eps = momentum, eps
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                          self._buffers["running_var"], self.training, self.momentum, self.eps)
