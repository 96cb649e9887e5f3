"""Feed-forward layers with explicit forward/backward passes.

Activations are batched and channels-last: a 1-D signal batch is (B, L, C).
Every layer caches what its backward pass needs during ``forward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict[str, Any] = field(default_factory=dict)

    KINDS = ("conv1d", "instance_norm", "relu", "dropout", "maxpool1d", "dense", "sigmoid", "tanh", "lstm", "flatten")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for k, v in self.hyper.items():
            if k == "rate":
                if not 0.0 <= v < 1.0:
                    raise ValueError("dropout rate must be in [0, 1)")
            elif isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"{self.kind}: hyperparameter {k} must be positive")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind)

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv1D(Layer):
    """'Same'-padded 1-D convolution, stride 1. Weights are (k, C_in, C_out)."""

    kind = "conv1d"

    def __init__(self, in_channels: int, filters: int, kernel_size: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        self.in_channels, self.filters, self.kernel_size = in_channels, filters, kernel_size
        limit = np.sqrt(6.0 / (kernel_size * in_channels))
        self.params["W"] = rng.uniform(-limit, limit, (kernel_size, in_channels, filters)).astype(dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ValueError(f"conv1d expects (B, L, {self.in_channels}), got {x.shape}")
        B, L, C = x.shape
        k = self.kernel_size
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        # (B, L, C, k) -> (B*L, k*C) matching W's (k, C) leading layout
        cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(B * L, k * C)
        W = self.params["W"].reshape(k * C, self.filters)
        out = cols @ W + self.params["b"]
        self._cache = (cols, x.shape)
        return out.reshape(B, L, self.filters)

    def backward(self, grad):
        cols, (B, L, C) = self._cached()
        k, pad = self.kernel_size, self.kernel_size // 2
        g = grad.reshape(B * L, self.filters)
        W = self.params["W"].reshape(k * C, self.filters)
        self.grads["W"] = (cols.T @ g).reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ W.T).reshape(B, L, k, C)
        dxp = np.zeros((B, L + k - 1, C), dtype=grad.dtype)
        for j in range(k):
            dxp[:, j : j + L] += dcols[:, :, j]
        return dxp[:, pad : pad + L]

    def output_shape(self, shape):
        return (shape[0], self.filters)

    def spec(self):
        return LayerSpec(self.kind, {"in_channels": self.in_channels, "filters": self.filters,
                                     "kernel_size": self.kernel_size})


class InstanceNorm(Layer):
    """Per-sample, per-channel normalisation over the length axis."""

    kind = "instance_norm"

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)

    def forward(self, x, training=False):
        if x.shape[1] < 2:
            raise ValueError("instance norm needs a length of at least 2")
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv = self._cached()
        L = xhat.shape[1]
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 1))
        self.grads["beta"] = grad.sum(axis=(0, 1))
        dxhat = grad * self.params["gamma"]
        return (inv / L) * (
            L * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )

    def spec(self):
        return LayerSpec(self.kind, {"channels": self.channels})


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._cached()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training=False):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * y * (1.0 - y)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, training=False):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * (1.0 - y * y)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode.

    ``fixed_mask`` pins the training mask (used by gradient checks).
    """

    kind = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate, self.rng = rate, rng
        self.fixed_mask: np.ndarray | None = None
        self._eval: bool | None = None

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._cache = None
            self._eval = True
            return x
        self._eval = False
        if self.fixed_mask is not None:
            mask = self.fixed_mask
        else:
            mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        if self._eval is None:
            raise RuntimeError("Dropout.backward called before forward")
        if self._eval:
            return grad
        return grad * self._cache

    def spec(self):
        return LayerSpec(self.kind, {"rate": self.rate})


class MaxPool1D(Layer):
    """Non-overlapping max pooling, stride = kernel; a trailing remainder is dropped."""

    kind = "maxpool1d"

    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x, training=False):
        B, L, C = x.shape
        k = self.kernel
        if L < k:
            raise ValueError("maxpool input shorter than the kernel")
        Lo = L // k
        xr = x[:, : Lo * k].reshape(B, Lo, k, C)
        idx = xr.argmax(axis=2)
        self._cache = (idx, x.shape)
        return np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, grad):
        idx, (B, L, C) = self._cached()
        k = self.kernel
        Lo = L // k
        d = np.zeros((B, Lo, k, C), dtype=grad.dtype)
        np.put_along_axis(d, idx[:, :, None, :], grad[:, :, None, :], axis=2)
        dx = np.zeros((B, L, C), dtype=grad.dtype)
        dx[:, : Lo * k] = d.reshape(B, Lo * k, C)
        return dx

    def output_shape(self, shape):
        return (shape[0] // self.kernel, shape[1])

    def spec(self):
        return LayerSpec(self.kind, {"kernel": self.kernel})


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    """Affine map on the last axis; leading axes are treated as batch."""

    kind = "dense"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_features, self.units = in_features, units
        limit = np.sqrt(6.0 / (in_features + units))
        self.params["W"] = rng.uniform(-limit, limit, (in_features, units)).astype(dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)

    def forward(self, x, training=False):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"dense expects last axis {self.in_features}, got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        x2 = x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.units)
        self.grads["W"] = x2.T @ g2
        self.grads["b"] = g2.sum(axis=0)
        return grad @ self.params["W"].T

    def output_shape(self, shape):
        return shape[:-1] + (self.units,)

    def spec(self):
        return LayerSpec(self.kind, {"in_features": self.in_features, "units": self.units})


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sequential:
    """Ordered stack of layers with named parameters ``"<index>.<param>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x, training: bool = False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    def shape_chain(self, input_shape: tuple) -> list[tuple]:
        shapes = [tuple(input_shape)]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes


def build_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> Layer:
    h = spec.hyper
    if spec.kind == "conv1d":
        return Conv1D(h["in_channels"], h["filters"], h["kernel_size"], rng, dtype)
    if spec.kind == "instance_norm":
        return InstanceNorm(h["channels"], dtype=dtype)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "sigmoid":
        return Sigmoid()
    if spec.kind == "tanh":
        return Tanh()
    if spec.kind == "dropout":
        return Dropout(h["rate"], np.random.default_rng(int(rng.integers(2**63 - 1))))
    if spec.kind == "maxpool1d":
        return MaxPool1D(h.get("kernel", 2))
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "dense":
        return Dense(h["in_features"], h["units"], rng, dtype)
    raise ValueError(f"layer kind {spec.kind!r} cannot be built inside a Sequential")


def build_sequential(specs: list[LayerSpec], seed: int, dtype=np.float64) -> Sequential:
    rng = np.random.default_rng(seed)
    return Sequential([build_layer(s, rng, dtype) for s in specs])
