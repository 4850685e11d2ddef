"""Categorical cross-entropy over the 8 output classes."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from src.errors import ShapeError
from src.nn.functional import log_softmax, softmax
from src.srh_io.labels import ClassLabel

P_FLOOR = 1.0e-12


def cross_entropy_loss(p: np.ndarray | Sequence[float], label: int | ClassLabel) -> float:
    """``-log p[label]`` with p clipped below at 1e-12."""
    idx = label.class_index if isinstance(label, ClassLabel) else int(label)
    return float(-np.log(max(float(np.asarray(p)[idx]), P_FLOOR)))


def softmax_cross_entropy(
    logits: np.ndarray,
    labels: Sequence[int] | np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and d loss / d logits."""
    lab = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != lab.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {lab.shape[0]} labels")
    n = logits.shape[0]
    logp = log_softmax(logits.astype(np.float64), axis=1)
    loss = float(-logp[np.arange(n), lab].mean())
    grad = softmax(logits.astype(np.float64), axis=1)
    grad[np.arange(n), lab] -= 1.0
    return loss, grad / n
