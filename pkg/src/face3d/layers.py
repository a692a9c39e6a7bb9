"""Differentiable layers on single-image (C, H, W) tensors, numpy only.

Every layer caches what its backward pass needs during forward and
accumulates parameter gradients into ``.grads``. Passing ``frozen=True`` to
forward makes the piecewise-linear layers (ReLU, max-pool) reuse the
structure recorded by the previous unfrozen pass — the mask / argmax routing
— which turns the whole network into a smooth function of its parameters.
The finite-difference checks rely on that.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, StaleActivations


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base: named parameters in .params, matching gradients in .grads."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self):
        for key, g in self.grads.items():
            g.fill(0.0)

    def forward(self, x: np.ndarray, frozen: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    """Stride-1 convolution with zero padding (same-size for odd kernels)."""

    def __init__(self, name, in_channels, out_channels, kernel_size=3, rng=None):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.pad = kernel_size // 2
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        self.params = {
            "w": glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, fan_out),
            "b": np.zeros(out_channels),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cols = None
        self._in_shape = None

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        k, p = self.k, self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        s0, s1, s2 = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp, shape=(c, k, k, h, w), strides=(s0, s1, s2, s1, s2), writeable=False
        )
        return windows.reshape(c * k * k, h * w)

    def forward(self, x, frozen=False):
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected ({self.in_channels}, H, W), got {x.shape}")
        cols = self._im2col(x)
        self._cols = cols
        self._in_shape = x.shape
        w = self.params["w"].reshape(self.out_channels, -1)
        out = w @ cols + self.params["b"][:, None]
        return out.reshape(self.out_channels, x.shape[1], x.shape[2])

    def backward(self, dout):
        if self._cols is None:
            raise StaleActivations(f"{self.name}: forward() before backward()")
        c, h, w = self._in_shape
        k, p = self.k, self.pad
        dmat = dout.reshape(self.out_channels, -1)
        self.grads["w"] += (dmat @ self._cols.T).reshape(self.params["w"].shape)
        self.grads["b"] += dout.sum(axis=(1, 2))
        dcols = (self.params["w"].reshape(self.out_channels, -1).T @ dmat).reshape(c, k, k, h, w)
        dxp = np.zeros((c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w] += dcols[:, i, j]
        return dxp[:, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def __init__(self, name):
        super().__init__(name)
        self._mask = None

    def forward(self, x, frozen=False):
        if frozen:
            if self._mask is None:
                raise StaleActivations(f"{self.name}: no recorded mask to freeze")
            return x * self._mask
        self._mask = x > 0.0
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            raise StaleActivations(f"{self.name}: forward() before backward()")
        return dout * self._mask


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; gradient routed to the argmax only."""

    def __init__(self, name):
        super().__init__(name)
        self._argmax = None
        self._in_shape = None

    @staticmethod
    def _windows(x):
        c, h, w = x.shape
        return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)

    def forward(self, x, frozen=False):
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"{self.name}: spatial dims must be even, got {x.shape}")
        win = self._windows(x)
        if frozen:
            if self._argmax is None or self._in_shape != x.shape:
                raise StaleActivations(f"{self.name}: no recorded argmax to freeze")
        else:
            self._argmax = np.argmax(win, axis=-1)
            self._in_shape = x.shape
        return np.take_along_axis(win, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        if self._argmax is None:
            raise StaleActivations(f"{self.name}: forward() before backward()")
        c, h, w = self._in_shape
        dwin = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, self._argmax[..., None], dout[..., None], axis=-1)
        return dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


class ConvTranspose2D(Layer):
    """Upsampling by an integer factor via non-overlapping transposed conv.

    Kernel size equals the stride, so each input cell paints one
    ``factor x factor`` output block.
    """

    def __init__(self, name, in_channels, out_channels, factor, rng=None):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.factor = factor
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * factor * factor
        fan_out = out_channels * factor * factor
        self.params = {
            "w": glorot_uniform(rng, (in_channels, out_channels, factor, factor), fan_in, fan_out),
            "b": np.zeros(out_channels),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, frozen=False):
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected ({self.in_channels}, H, W), got {x.shape}")
        self._x = x
        f = self.factor
        _, h, w = x.shape
        t = np.einsum("iokl,ihw->ohkwl", self.params["w"], x)
        out = t.reshape(self.out_channels, h * f, w * f)
        return out + self.params["b"][:, None, None]

    def backward(self, dout):
        if self._x is None:
            raise StaleActivations(f"{self.name}: forward() before backward()")
        f = self.factor
        _, h, w = self._x.shape
        dt = dout.reshape(self.out_channels, h, f, w, f)
        self.grads["w"] += np.einsum("ohkwl,ihw->iokl", dt, self._x)
        self.grads["b"] += dout.sum(axis=(1, 2))
        return np.einsum("ohkwl,iokl->ihw", dt, self.params["w"])


class Dense(Layer):
    """Fully connected layer on flat vectors."""

    def __init__(self, name, in_dim, out_dim, rng=None):
        super().__init__(name)
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng or np.random.default_rng(0)
        self.params = {
            "w": glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim),
            "b": np.zeros(out_dim),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, frozen=False):
        if x.shape != (self.in_dim,):
            raise ShapeMismatch(f"{self.name}: expected ({self.in_dim},), got {x.shape}")
        self._x = x
        return self.params["w"] @ x + self.params["b"]

    def backward(self, dout):
        if self._x is None:
            raise StaleActivations(f"{self.name}: forward() before backward()")
        self.grads["w"] += np.outer(dout, self._x)
        self.grads["b"] += dout
        return self.params["w"].T @ dout


def softmax_channels(scores: np.ndarray) -> np.ndarray:
    """Channel-wise softmax over axis 0 of a (C, H, W) score map."""
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)
