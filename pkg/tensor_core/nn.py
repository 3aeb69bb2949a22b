import copy
import math
from typing import Iterator, Mapping

import numpy as np

from main.exceptions import ConfigError, DimensionError

from . import ops
from .tensor import Tensor


def parameter(array) -> Tensor:
    return Tensor(array, requires_grad=True)


def _uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in) if fan_in else 0.0
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """
    Container of named parameters. Parameters are requires_grad leaf tensors
    stored as attributes (directly, in sub-modules, or in lists of sub-modules).
    """

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{index}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def bind(self, params: Mapping[str, Tensor]) -> "Module":
        """Copy of this module with the named parameters replaced."""
        return self._bind(params, "")

    def _bind(self, params, prefix):
        clone = copy.copy(self)
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if key in params:
                    replacement = params[key]
                    if replacement.shape != value.shape:
                        raise DimensionError(
                            f"parameter {key}: shape {replacement.shape}, expected {value.shape}"
                        )
                    setattr(clone, name, replacement)
            elif isinstance(value, Module):
                setattr(clone, name, value._bind(params, f"{key}."))
            elif isinstance(value, (list, tuple)):
                setattr(
                    clone,
                    name,
                    type(value)(
                        item._bind(params, f"{key}.{index}.")
                        if isinstance(item, Module)
                        else item
                        for index, item in enumerate(value)
                    ),
                )
        return clone

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> "Module":
        expected = self.parameters()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing[:5])}")
        return self.bind({name: parameter(arrays[name]) for name in expected})


class Linear(Module):
    """``y = x W + b`` applied over the last axis of ``x``."""

    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _uniform(rng, in_features, (in_features, out_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x):
        x = ops.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last axis {self.in_features}, got {x.shape}"
            )
        lead = x.shape[:-1]
        flat = ops.reshape(x, (-1, self.in_features))
        out = ops.matmul(flat, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return ops.reshape(out, lead + (self.out_features,))


class MLP(Module):
    """Two linear layers with a ReLU between them."""

    def __init__(self, in_features, hidden, out_features, rng):
        self.first = Linear(in_features, hidden, rng)
        self.second = Linear(hidden, out_features, rng)

    def __call__(self, x):
        return self.second(ops.relu(self.first(x)))


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _uniform(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size))
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseSeparableConv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        self.depthwise = _uniform(
            rng, kernel_size * kernel_size, (in_channels, 1, kernel_size, kernel_size)
        )
        self.pointwise = _uniform(rng, in_channels, (out_channels, in_channels, 1, 1))
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.depthwise_separable_conv2d(
            x,
            self.depthwise,
            self.pointwise,
            stride=self.stride,
            padding=self.padding,
            pointwise_bias=self.bias,
        )


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1):
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        self.weight = _uniform(
            rng, in_channels, (in_channels, out_channels, kernel_size, kernel_size)
        )
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride

    def __call__(self, x, output_size=None):
        return ops.transposed_conv2d(x, self.weight, self.bias, self.stride, output_size)
