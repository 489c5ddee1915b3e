"""Dense tensors and the CNN building blocks: convolution, max pooling,
flattening, fully connected layers and the activations around them.

Tensors are ``height x width x channels`` float64 arrays stored row-major with
the channel index varying fastest. All operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class TensorError(ValueError):
    """Invalid tensor, kernel or layer arguments."""


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable ``(height, width, channels)`` block of finite doubles."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or 0 in arr.shape:
            raise TensorError(f"tensor must be a non-empty HxWxC array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains non-finite values")
        object.__setattr__(self, "array", _frozen(arr))

    @classmethod
    def from_flat(cls, height, width, channels, data):
        data = np.asarray(data, dtype=np.float64)
        if data.size != height * width * channels:
            raise TensorError(
                f"data length {data.size} != {height}x{width}x{channels}"
            )
        return cls(data.reshape(height, width, channels))

    @property
    def height(self):
        return self.array.shape[0]

    @property
    def width(self):
        return self.array.shape[1]

    @property
    def channels(self):
        return self.array.shape[2]

    @property
    def shape(self):
        return self.array.shape

    @property
    def data(self):
        """Flat row-major, channel-minor view."""
        return self.array.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.array, other.array))

    def __repr__(self):
        return f"Tensor({self.height}x{self.width}x{self.channels})"


@dataclass(frozen=True, eq=False)
class Kernel:
    """Convolution filter bank.

    ``weights`` has shape ``(kh, kw, in_channels, out_channels)``, which is
    also its flat storage order; ``bias`` has one entry per output channel.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[:, :, None, None]
        if w.ndim != 4 or 0 in w.shape:
            raise TensorError(f"kernel weights must be kh x kw x cin x cout, got {w.shape}")
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if b.size != w.shape[3]:
            raise TensorError(f"bias length {b.size} != out_channels {w.shape[3]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise TensorError("kernel contains non-finite weights")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @classmethod
    def from_flat(cls, kh, kw, in_channels, out_channels, weights, bias):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size != kh * kw * in_channels * out_channels:
            raise TensorError(
                f"weights length {weights.size} != {kh}x{kw}x{in_channels}x{out_channels}"
            )
        return cls(weights.reshape(kh, kw, in_channels, out_channels), bias)

    @property
    def kh(self):
        return self.weights.shape[0]

    @property
    def kw(self):
        return self.weights.shape[1]

    @property
    def in_channels(self):
        return self.weights.shape[2]

    @property
    def out_channels(self):
        return self.weights.shape[3]


def conv2d(input: Tensor, kernel: Kernel, stride: int = 1, *, backend=None) -> Tensor:
    """Valid cross-correlation of ``input`` with ``kernel`` (no flip, no padding).

    Output is ``floor((H - kh) / stride) + 1`` by ``floor((W - kw) / stride) + 1``
    with ``kernel.out_channels`` channels.
    """
    if stride < 1:
        raise TensorError(f"stride must be >= 1, got {stride}")
    if kernel.in_channels != input.channels:
        raise TensorError(
            f"channel mismatch: kernel expects {kernel.in_channels}, input has {input.channels}"
        )
    if kernel.kh > input.height or kernel.kw > input.width:
        raise TensorError(
            f"kernel {kernel.kh}x{kernel.kw} larger than input {input.height}x{input.width}"
        )
    impl = backend or kernels.active
    return Tensor(impl.conv2d(input.array, kernel.weights, kernel.bias, int(stride)))


def maxpool2d(input: Tensor, ph: int, pw: int, *, backend=None) -> Tensor:
    """Non-overlapping max pooling; partial trailing windows are dropped."""
    if ph < 1 or pw < 1:
        raise TensorError(f"pool window must be at least 1x1, got {ph}x{pw}")
    if ph > input.height or pw > input.width:
        raise TensorError(
            f"pool window {ph}x{pw} larger than input {input.height}x{input.width}"
        )
    impl = backend or kernels.active
    return Tensor(impl.maxpool2d(input.array, int(ph), int(pw)))


def flatten(input: Tensor) -> np.ndarray:
    return input.array.reshape(-1).copy()


def dense(input, weights, bias, *, backend=None) -> np.ndarray:
    """``weights @ input + bias`` with ``weights`` shaped ``(out, in)``."""
    x = np.ascontiguousarray(input, dtype=np.float64).reshape(-1)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64).reshape(-1)
    if w.ndim != 2:
        raise TensorError(f"dense weights must be a matrix, got shape {w.shape}")
    if w.shape[1] != x.size:
        raise TensorError(f"dense expects {w.shape[1]} inputs, got {x.size}")
    if b.size != w.shape[0]:
        raise TensorError(f"bias length {b.size} != dense outputs {w.shape[0]}")
    impl = backend or kernels.active
    return impl.dense(x, w, b)


def relu(input):
    return np.maximum(np.asarray(input, dtype=np.float64), 0.0)


def softmax(input) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise TensorError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise TensorError("softmax input contains non-finite values")
    e = np.exp(x - x.max())
    return e / math.fsum(e)


def dense_weight_count(inputs: int, outputs: int) -> int:
    """Weights of a fully connected layer, bias excluded."""
    return int(inputs) * int(outputs)
