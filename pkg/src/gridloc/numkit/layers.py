"""
Parameterized layers over the primitives in ``ops``.

Each layer owns named Parameters. Weights are He-initialized from a seed
derived from the run seed and the parameter's name, so a parameter keeps its
initial value when unrelated layers are added or removed.
"""

from typing import Iterator, Optional

import numpy as np

from ..config import derive_seed
from . import ops
from .optim import he_init, make_rng
from .tensor import Parameter, Tensor, get_default_dtype


class Layer:
    """Base class: anything that owns Parameters."""

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Layer):
                yield from value.parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.parameters()
            elif isinstance(value, dict):
                for item in value.values():
                    if isinstance(item, Layer):
                        yield from item.parameters()

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


def _weight(name: str, shape: tuple, fan_in: int, seed: int, std: Optional[float] = None) -> Parameter:
    if std is None:
        return Parameter(name, he_init(shape, fan_in, derive_seed(seed, name)))
    values = make_rng(derive_seed(seed, name)).standard_normal(shape) * std
    return Parameter(name, values)


def _bias(name: str, size: int, value: float = 0.0) -> Parameter:
    return Parameter(name, np.full(size, value, dtype=get_default_dtype()))


class Conv2d(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, seed: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1):
        self.weight = _weight(f"{name}.weight", (out_channels, in_channels, kernel, kernel),
                              in_channels * kernel * kernel, seed)
        self.bias = _bias(f"{name}.bias", out_channels)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Layer):
    """Weight layout (in, out, k, k); fan-in counts the taps each output actually sees."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, seed: int,
                 stride: int = 2, padding: int = 1):
        fan_in = max(in_channels * kernel * kernel // (stride * stride), 1)
        self.weight = _weight(f"{name}.weight", (in_channels, out_channels, kernel, kernel), fan_in, seed)
        self.bias = _bias(f"{name}.bias", out_channels)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, seed: int, std: Optional[float] = None):
        self.weight = _weight(f"{name}.weight", (out_features, in_features), in_features, seed, std)
        self.bias = _bias(f"{name}.bias", out_features)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class GroupedHeads(Layer):
    """One 1x1 output channel per group; biases start at ``bias_init``."""

    def __init__(self, name: str, groups: int, channels: int, seed: int, bias_init: float = 0.0):
        self.weight = _weight(f"{name}.weight", (groups, channels), channels, seed)
        self.bias = _bias(f"{name}.bias", groups, bias_init)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.grouped_pointwise(x, self.weight, self.bias)
