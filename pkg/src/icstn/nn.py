"""Small dense layer library with hand-written backward passes.

Arrays are plain ``numpy.ndarray``; images are ``(N, C, H, W)``. Every
layer exposes ``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx``
so one layer instance can be applied several times per step (the shared
predictor of a recurrent transformer) with gradients summed over calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DataFormatError


@dataclass
class LayerParams:
    kind: str  # "conv" or "fc"
    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None)
    grad_bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self):
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


# -- functional forms ---------------------------------------------------------


def conv2d_forward(x, params: LayerParams, stride: int = 1):
    """Valid cross-correlation plus bias: ``(N, C, H, W) -> (N, O, H-k+1, W-k+1)``."""
    if stride != 1:
        raise ConfigurationError("only stride 1 convolutions are supported")
    w = params.weights
    o, c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ConfigurationError(
            f"conv expects (N, {c}, H, W) input, got {x.shape}"
        )
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ConfigurationError(
            f"{kh}x{kw} kernel does not fit a {x.shape[2]}x{x.shape[3]} input"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    y = y.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(grad_out, cached_input, params: LayerParams, need_input_grad=True):
    """Accumulate weight/bias gradients; return the gradient w.r.t. the input."""
    w = params.weights
    o, c, kh, kw = w.shape
    win = sliding_window_view(cached_input, (kh, kw), axis=(2, 3))
    params.grad_weights += np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    params.grad_bias += grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None
    padded = np.pad(grad_out, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    pwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # N, O, H, W, kh, kw
    dx = np.tensordot(pwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # N, H, W, C
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def fc_forward(x, params: LayerParams):
    """``y = x W^T + b`` for ``x`` of shape ``(N, F)`` and ``W`` of shape ``(F', F)``."""
    if x.ndim != 2 or x.shape[1] != params.weights.shape[1]:
        raise ConfigurationError(
            f"FC layer expects {params.weights.shape[1]} input features, got {x.shape}"
        )
    return x @ params.weights.T + params.bias


def fc_backward(grad_out, cached_input, params: LayerParams, need_input_grad=True):
    params.grad_weights += grad_out.T @ cached_input
    params.grad_bias += grad_out.sum(axis=0)
    if not need_input_grad:
        return None
    return grad_out @ params.weights


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max pooling; returns ``(y, argmax)``.

    Ties go to the first element in row-major window order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"2x2 max pooling needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2x2_backward(grad_out, argmax):
    n, c, ho, wo = grad_out.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, 2 * ho, 2 * wo)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, cached_input):
    return grad_out * (cached_input > 0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataFormatError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DataFormatError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / n


# -- layer objects ------------------------------------------------------------


class Layer:
    params: LayerParams | None = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_input_grad=True):
        raise NotImplementedError

    def output_shape(self, in_shape):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng=None, zero=False, dtype=np.float64):
        k = int(kernel_size)
        shape = (out_channels, in_channels, k, k)
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.default_rng() if rng is None else rng
            w = rng.normal(0.0, np.sqrt(2.0 / (in_channels * k * k)), shape).astype(dtype)
        self.params = LayerParams("conv", w, np.zeros(out_channels, dtype=dtype))
        self.kernel_size = k

    def forward(self, x):
        return conv2d_forward(x, self.params), x

    def backward(self, dy, cache, need_input_grad=True):
        return conv2d_backward(dy, cache, self.params, need_input_grad)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        o, ci, k, _ = self.params.weights.shape
        if c != ci:
            raise ConfigurationError(f"conv expects {ci} input channels, got {c}")
        if h < k or w < k:
            raise ConfigurationError(f"{k}x{k} kernel does not fit a {h}x{w} input")
        return (o, h - k + 1, w - k + 1)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, zero=False, dtype=np.float64):
        shape = (out_features, in_features)
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.default_rng() if rng is None else rng
            w = rng.normal(0.0, np.sqrt(2.0 / in_features), shape).astype(dtype)
        self.params = LayerParams("fc", w, np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        x2 = x.reshape(x.shape[0], -1)
        return fc_forward(x2, self.params), (x2, x.shape)

    def backward(self, dy, cache, need_input_grad=True):
        x2, shape = cache
        dx = fc_backward(dy, x2, self.params, need_input_grad)
        return None if dx is None else dx.reshape(shape)

    def output_shape(self, in_shape):
        n_in = int(np.prod(in_shape))
        if n_in != self.params.weights.shape[1]:
            raise ConfigurationError(
                f"FC layer expects {self.params.weights.shape[1]} inputs, got {n_in}"
            )
        return (self.params.weights.shape[0],)


class MaxPool2x2(Layer):
    def forward(self, x):
        y, arg = maxpool2x2_forward(x)
        return y, arg

    def backward(self, dy, cache, need_input_grad=True):
        return maxpool2x2_backward(dy, cache)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"2x2 max pooling needs even extents, got {h}x{w}")
        return (c, h // 2, w // 2)


class ReLU(Layer):
    def forward(self, x):
        return relu_forward(x), x

    def backward(self, dy, cache, need_input_grad=True):
        return relu_backward(dy, cache)

    def output_shape(self, in_shape):
        return in_shape


class Sequential:
    """Chain of layers with per-call caches."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dy, caches, need_input_grad=True):
        for i in range(len(self.layers) - 1, -1, -1):
            needed = need_input_grad or i > 0
            dy = self.layers[i].backward(dy, caches[i], needed)
        return dy

    def __call__(self, x):
        return self.forward(x)[0]

    @property
    def params(self) -> list[LayerParams]:
        return [layer.params for layer in self.layers if layer.params is not None]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


# -- optimizer ----------------------------------------------------------------


@dataclass
class SgdConfig:
    learning_rate: dict  # parameter group name -> step size
    batch_size: int = 100
    iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.learning_rate, (int, float)):
            self.learning_rate = {"default": float(self.learning_rate)}
        for name, lr in self.learning_rate.items():
            if not lr > 0:
                raise ConfigurationError(f"learning rate for group {name!r} must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")


def sgd_step(groups: dict, config: SgdConfig):
    """Plain SGD ``w <- w - lr * grad`` per parameter group, then zero the gradients.

    ``groups`` maps a group name to a list of :class:`LayerParams`; each group
    uses ``config.learning_rate[name]``.
    """
    for name, plist in groups.items():
        lr = config.learning_rate[name]
        seen = set()
        for p in plist:
            if id(p) in seen:
                continue
            seen.add(id(p))
            p.weights -= lr * p.grad_weights
            p.bias -= lr * p.grad_bias
            p.zero_grad()
