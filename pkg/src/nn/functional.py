"""Normalization, similarity and softmax primitives."""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from src.errors import DegenerateNormError

EPS_NORM = 1.0e-8


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale ``v`` (a vector, or rows of a matrix) to unit Euclidean norm."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNormError(
            f"cannot normalize a vector with norm <= {EPS_NORM:g} "
            f"(min norm {float(norms.min()):.3g})"
        )
    return v / norms


def l2_normalize_backward(u: np.ndarray, z: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Gradient through row-wise ``z = u / |u|`` given upstream ``dz``."""
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    return (dz - z * np.sum(z * dz, axis=-1, keepdims=True)) / norms


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Similarity of two unit vectors on the hypersphere: their dot product."""
    return float(np.dot(np.ravel(a), np.ravel(b)))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return _softmax(logits, axis=axis)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return _log_softmax(logits, axis=axis)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)
