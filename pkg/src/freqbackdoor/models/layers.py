"""Layer primitives with hand-written backward passes.

A layer owns no parameters itself. ``forward(params, x)`` receives the list of
parameter arrays (views into the classifier's flat vector) and returns the
output plus a cache; ``backward(params, cache, dy)`` returns the input gradient
and the list of parameter gradients in the same order as ``param_shapes``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    name = "layer"

    def param_shapes(self) -> list[tuple[int, ...]]:
        return []

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dy):
        raise NotImplementedError


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    name = "dense"

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def init_params(self, rng):
        return [_glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out), np.zeros(self.n_out)]

    def output_shape(self, in_shape):
        return (self.n_out,)

    def forward(self, params, x):
        W, b = params
        return x @ W + b, x

    def backward(self, params, x, dy):
        W, _ = params
        return dy @ W.T, [x.T @ dy, dy.sum(axis=0)]


class Flatten(Layer):
    name = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, dy):
        return dy.reshape(shape), []


class ELU(Layer):
    name = "elu"

    def forward(self, params, x):
        neg = np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0, x, neg)
        return y, (x, neg)

    def backward(self, params, cache, dy):
        x, neg = cache
        return dy * np.where(x > 0, 1.0, neg + 1.0), []


class ReLU(Layer):
    name = "relu"

    def forward(self, params, x):
        return np.maximum(x, 0.0), x

    def backward(self, params, x, dy):
        return dy * (x > 0), []


class SpatialConv(Layer):
    """Filters spanning all electrodes: (N, E, T) -> (N, S, T)."""

    name = "spatial"

    def __init__(self, n_electrodes: int, n_filters: int):
        self.E, self.S = n_electrodes, n_filters

    def param_shapes(self):
        return [(self.S, self.E), (self.S,)]

    def init_params(self, rng):
        return [_glorot(rng, (self.S, self.E), self.E, self.S), np.zeros(self.S)]

    def output_shape(self, in_shape):
        return (self.S, in_shape[1])

    def forward(self, params, x):
        W, b = params
        return np.matmul(W, x) + b[:, None], x

    def backward(self, params, x, dy):
        W, _ = params
        dW = np.einsum("nst,net->se", dy, x, optimize=True)
        return np.matmul(W.T, dy), [dW, dy.sum(axis=(0, 2))]


class Conv1d(Layer):
    """'Same'-padded temporal convolution: (N, Cin, L) -> (N, Cout, L)."""

    name = "conv1d"

    def __init__(self, c_in: int, c_out: int, kernel: int):
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.pad_left = (kernel - 1) // 2
        self.pad_right = kernel - 1 - self.pad_left

    def param_shapes(self):
        return [(self.c_out, self.c_in, self.k), (self.c_out,)]

    def init_params(self, rng):
        fan_in, fan_out = self.c_in * self.k, self.c_out * self.k
        return [_glorot(rng, (self.c_out, self.c_in, self.k), fan_in, fan_out), np.zeros(self.c_out)]

    def output_shape(self, in_shape):
        return (self.c_out, in_shape[1])

    def forward(self, params, x):
        W, b = params
        N, C, L = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad_left, self.pad_right)))
        cols = sliding_window_view(xp, self.k, axis=2).transpose(0, 2, 1, 3).reshape(N * L, C * self.k)
        y = cols @ W.reshape(self.c_out, -1).T + b
        return y.reshape(N, L, self.c_out).transpose(0, 2, 1), (cols, x.shape)

    def backward(self, params, cache, dy):
        W, _ = params
        cols, (N, C, L) = cache
        dyr = dy.transpose(0, 2, 1).reshape(N * L, self.c_out)
        dW = (dyr.T @ cols).reshape(W.shape)
        # input gradient is a correlation of dy with the flipped, channel-swapped kernel
        dyp = np.pad(dy, ((0, 0), (0, 0), (self.pad_right, self.pad_left)))
        dcols = sliding_window_view(dyp, self.k, axis=2).transpose(0, 2, 1, 3).reshape(N * L, self.c_out * self.k)
        Wt = W[:, :, ::-1].transpose(1, 0, 2).reshape(C, -1)
        dx = (dcols @ Wt.T).reshape(N, L, C).transpose(0, 2, 1)
        return dx, [dW, dyr.sum(axis=0)]


class AvgPool1d(Layer):
    name = "avgpool"

    def __init__(self, width: int):
        self.width = width

    def output_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // self.width)

    def forward(self, params, x):
        N, C, L = x.shape
        Lo = L // self.width
        y = x[:, :, : Lo * self.width].reshape(N, C, Lo, self.width).mean(axis=3)
        return y, L

    def backward(self, params, L, dy):
        N, C, Lo = dy.shape
        dx = np.zeros((N, C, L))
        dx[:, :, : Lo * self.width] = np.repeat(dy / self.width, self.width, axis=2)
        return dx, []


class GlobalAvgPool(Layer):
    """Mean over every axis after the channel axis: (N, C, ...) -> (N, C)."""

    name = "gap"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, params, x):
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2), x.shape

    def backward(self, params, shape, dy):
        n = int(np.prod(shape[2:]))
        return np.broadcast_to((dy / n).reshape(dy.shape + (1,) * (len(shape) - 2)), shape).copy(), []


class ChannelStandardize(Layer):
    """Parameter-free per-channel standardization over batch and positions.

    Stands in for batch normalization at batch size one.
    """

    name = "standardize"

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, params, x):
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        return xhat, (xhat, inv, axes)

    def backward(self, params, cache, dy):
        xhat, inv, axes = cache
        m = np.prod([xhat.shape[a] for a in axes])
        dx = inv / m * (m * dy - dy.sum(axis=axes, keepdims=True)
                        - xhat * (dy * xhat).sum(axis=axes, keepdims=True))
        return dx, []


class SampleStandardize(Layer):
    """Per-sample z-normalization over all non-batch axes (no parameters)."""

    name = "sample_standardize"

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def forward(self, params, x):
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        return xhat, (xhat, inv, axes)

    def backward(self, params, cache, dy):
        xhat, inv, axes = cache
        m = np.prod([xhat.shape[a] for a in axes])
        dx = inv / m * (m * dy - dy.sum(axis=axes, keepdims=True)
                        - xhat * (dy * xhat).sum(axis=axes, keepdims=True))
        return dx, []


class ChannelGate(Layer):
    """Multiplies channel (axis 1) activations by a fixed 0/1 gate; used for pruning."""

    name = "gate"

    def __init__(self, n_channels: int):
        self.n_channels = n_channels
        self.gate = np.ones(n_channels)

    def forward(self, params, x):
        if self.gate.all():
            return x, None
        g = self.gate.reshape((1, -1) + (1,) * (x.ndim - 2))
        return x * g, g

    def backward(self, params, g, dy):
        return (dy if g is None else dy * g), []


class RowConv(Layer):
    """Temporal convolution applied independently to every row of a 2-D map.

    (N, Cin, R, L) -> (N, Cout, R, L) with a (1, k) kernel shared across rows.
    """

    name = "rowconv"

    def __init__(self, c_in: int, c_out: int, kernel: int):
        self.inner = Conv1d(c_in, c_out, kernel)

    def param_shapes(self):
        return self.inner.param_shapes()

    def init_params(self, rng):
        return self.inner.init_params(rng)

    def forward(self, params, x):
        N, C, R, L = x.shape
        y, cache = self.inner.forward(params, x.transpose(0, 2, 1, 3).reshape(N * R, C, L))
        return y.reshape(N, R, -1, L).transpose(0, 2, 1, 3), (cache, x.shape)

    def backward(self, params, cache, dy):
        inner_cache, (N, C, R, L) = cache
        dyr = dy.transpose(0, 2, 1, 3).reshape(N * R, -1, L)
        dx, grads = self.inner.backward(params, inner_cache, dyr)
        return dx.reshape(N, R, C, L).transpose(0, 2, 1, 3), grads


class RowAvgPool(Layer):
    """(1, w) average pooling on (N, C, R, L) maps."""

    name = "rowpool"

    def __init__(self, width: int):
        self.width = width

    def forward(self, params, x):
        N, C, R, L = x.shape
        Lo = L // self.width
        return x[..., : Lo * self.width].reshape(N, C, R, Lo, self.width).mean(axis=4), L

    def backward(self, params, L, dy):
        N, C, R, Lo = dy.shape
        dx = np.zeros((N, C, R, L))
        dx[..., : Lo * self.width] = np.repeat(dy / self.width, self.width, axis=3)
        return dx, []
