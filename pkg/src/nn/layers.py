"""Differentiable layers with hand-derived gradients.

Every layer caches what its backward pass needs during ``forward(x,
cache=True)``; ``backward`` without a cached forward raises StateError.
Parameters live in an insertion-ordered ``params`` dict and gradients in a
matching ``grads`` dict; the ordering is the declaration order used by
checkpoints.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ShapeError, StateError

KERNEL = 3
PAD = 1


class Layer:
    name: str = ""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: Optional[Any] = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clear_cache(self) -> None:
        self._cache = None

    def _cached(self) -> Any:
        if self._cache is None:
            raise StateError(f"{self.name or type(self).__name__}: backward called before forward")
        return self._cache

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype: Any) -> None:
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        self.clear_cache()


class Conv2d(Layer):
    """3x3 convolution, zero padding 1, configurable stride.

    Output side is ``(side + 2 - 3) // stride + 1``. Weights are (F, C, 3, 3).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
        name: str = "conv",
        dtype: Any = np.float32,
    ) -> None:
        super().__init__()
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        fan_in = in_channels * KERNEL * KERNEL
        bound = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(
            -bound, bound, size=(out_channels, in_channels, KERNEL, KERNEL)
        ).astype(dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def output_side(self, side: int) -> int:
        return (side + 2 * PAD - KERNEL) // self.stride + 1

    def _windows(self, xp: np.ndarray) -> np.ndarray:
        # (N, C, Ho, Wo, 3, 3) view into the padded input
        win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
        win = self._windows(xp)
        out = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["b"].reshape(1, -1, 1, 1)
        if cache:
            self._cache = (x.shape, xp, win)
        return np.ascontiguousarray(out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, xp, win = self._cached()
        s = self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        self.grads["W"] = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["b"] = dout.sum(axis=(0, 2, 3))

        dxp = np.zeros_like(xp)
        W = self.params["W"]
        for ki in range(KERNEL):
            for kj in range(KERNEL):
                contrib = np.einsum("nfhw,fc->nchw", dout, W[:, :, ki, kj])
                dxp[:, :, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s] += contrib
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, PAD:PAD + h, PAD:PAD + w]


class ReLU(Layer):
    def __init__(self, name: str = "relu") -> None:
        super().__init__()
        self.name = name

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        mask = x > 0
        if cache:
            self._cache = mask
        return x * mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._cached()


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C): the final 1x1 spatial reduction."""

    def __init__(self, name: str = "pool") -> None:
        super().__init__()
        self.name = name

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._cached()
        return np.broadcast_to(dout[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Dense(Layer):
    """``y = x @ W + b`` with W of shape (in, out)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator],
        name: str = "dense",
        dtype: Any = np.float32,
    ) -> None:
        super().__init__()
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.params["W"] = np.zeros((in_features, out_features), dtype=dtype)
        else:
            bound = np.sqrt(3.0 / in_features)
            self.params["W"] = rng.uniform(
                -bound, bound, size=(in_features, out_features)
            ).astype(dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        if cache:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._cached()
        self.grads["W"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T
