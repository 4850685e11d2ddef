"""SGD with momentum and Adam.

``sgd_step`` and ``adam_step`` are pure: they return new arrays and never
touch their inputs. The optimizer classes hold the state and are the single
writer of the parameter dict they were given.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from src.errors import ContractError, ShapeError


def _same_shape(**arrays: np.ndarray) -> None:
    shapes = {k: np.shape(v) for k, v in arrays.items()}
    if len(set(shapes.values())) > 1:
        raise ShapeError(f"shape mismatch: {shapes}")


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float,
    velocity: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """v <- momentum * v + g;  theta <- theta - lr * v."""
    param = np.asarray(param)
    if velocity is None:
        velocity = np.zeros_like(param)
    _same_shape(param=param, grad=np.asarray(grad), velocity=np.asarray(velocity))
    v = momentum * velocity + grad
    return (param - lr * v).astype(param.dtype), v.astype(param.dtype)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    m: Optional[np.ndarray],
    v: Optional[np.ndarray],
    t: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bias-corrected Adam update; ``t`` is the 1-based step count."""
    if t < 1:
        raise ContractError(f"adam step count must be >= 1, got {t}")
    param = np.asarray(param)
    m = np.zeros_like(param) if m is None else m
    v = np.zeros_like(param) if v is None else v
    _same_shape(param=param, grad=np.asarray(grad), m=np.asarray(m), v=np.asarray(v))
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * np.square(grad)
    m_hat = m_new / (1.0 - beta1 ** t)
    v_hat = v_new / (1.0 - beta2 ** t)
    updated = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated.astype(param.dtype), m_new.astype(param.dtype), v_new.astype(param.dtype)


class SGD:
    """Momentum SGD state; ``step`` maps (params, grads) to updated params."""

    def __init__(self, lr: float, momentum: float = 0.0) -> None:
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
    ) -> dict[str, np.ndarray]:
        updated: dict[str, np.ndarray] = {}
        for k, p in params.items():
            updated[k], self.velocity[k] = sgd_step(
                p, grads[k], self.lr, self.momentum, self.velocity.get(k)
            )
        return updated


class Adam:
    """Adam state; ``step`` maps (params, grads) to updated params."""

    def __init__(
        self,
        lr: float = 1.0e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1.0e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
    ) -> dict[str, np.ndarray]:
        self.t += 1
        updated: dict[str, np.ndarray] = {}
        for k, p in params.items():
            updated[k], self.m[k], self.v[k] = adam_step(
                p, grads[k], self.lr, self.beta1, self.beta2, self.eps,
                self.m.get(k), self.v.get(k), self.t,
            )
        return updated
