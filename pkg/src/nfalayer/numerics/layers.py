"""Small parameter-holding layers built on the tape primitives."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Layer:
    """Collects Parameters, BatchNormStates and sub-layers from its attributes."""

    name: str = ""

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, (Layer, Parameter, ops.BatchNormState)):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Layer))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Layer))

    def parameters(self) -> Iterator[Parameter]:
        for child in self._children():
            if isinstance(child, Parameter):
                yield child
            elif isinstance(child, Layer):
                yield from child.parameters()

    def buffers(self) -> Iterator[tuple[str, "BatchNorm2d"]]:
        for child in self._children():
            if isinstance(child, BatchNorm2d):
                yield child.name, child
            elif isinstance(child, Layer):
                yield from child.buffers()


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator, bias: bool = True):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Layer):
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.state = ops.BatchNormState(channels)

    def __call__(self, x, train: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, "train" if train else "eval")


class ConvBlock(Layer):
    """3x3 convolution, batch normalization, ReLU."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", c_in, c_out, 3, rng)
        self.bn = BatchNorm2d(f"{name}.bn", c_out)

    def __call__(self, x, train: bool) -> Tensor:
        return ops.relu(self.bn(self.conv(x), train))


class WindowAttention(Layer):
    """Local self-attention over a ``window x window`` neighbourhood.

    Queries, keys and values are 1x1 projections. Logits get a learned scalar
    bias per window offset (and head); padded positions outside the image are
    excluded from the softmax.
    """

    def __init__(self, name: str, channels: int, rng: np.random.Generator, window: int = 7, heads: int = 1):
        from ..errors import ParameterError

        if window < 1 or window % 2 == 0:
            raise ParameterError(f"attention window must be odd, got {window}")
        if channels % heads:
            raise ParameterError(f"{channels} channels cannot be split into {heads} heads")
        self.name = name
        self.window = window
        self.heads = heads
        self.query = Conv2d(f"{name}.query", channels, channels, 1, rng, bias=False)
        self.key = Conv2d(f"{name}.key", channels, channels, 1, rng, bias=False)
        self.value = Conv2d(f"{name}.value", channels, channels, 1, rng, bias=True)
        self.offset_bias = Parameter(f"{name}.offset_bias", np.zeros((heads, window * window)))

    def __call__(self, x, train: bool = True) -> Tensor:
        n, c, h, w = x.shape
        heads, d, ww = self.heads, c // self.heads, self.window * self.window
        q = ops.reshape(self.query(x), (n, heads, d, 1, h, w))
        k = ops.reshape(ops.window_unfold(self.key(x), self.window), (n, heads, d, ww, h, w))
        v = ops.reshape(ops.window_unfold(self.value(x), self.window), (n, heads, d, ww, h, w))
        logits = ops.sum(q * k, axis=2) * (1.0 / math.sqrt(d))
        logits = logits + ops.reshape(self.offset_bias, (1, heads, ww, 1, 1))
        inside = ops.window_unfold(Tensor(np.ones((1, 1, h, w))), self.window).data > 0
        attn = ops.softmax(logits, axis=2, mask=inside)
        out = ops.sum(ops.reshape(attn, (n, heads, 1, ww, h, w)) * v, axis=3)
        return ops.reshape(out, (n, c, h, w))


def conv1x1_constant(x, matrix: np.ndarray, bias: Optional[np.ndarray] = None) -> Tensor:
    """Channel mixing by a fixed (non-trainable) matrix."""
    return ops.conv2d(x, Tensor(matrix[:, :, None, None]), None if bias is None else Tensor(bias))
