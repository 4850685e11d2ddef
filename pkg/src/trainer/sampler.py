"""Epoch batch samplers.

``class_balanced_batches`` guarantees every class present in a batch has at
least two members, so each supervised contrastive anchor has a positive.
"""

from __future__ import annotations

import math

import numpy as np

from src.errors import ContractError, SamplerError


def shuffled_batches(
    n: int,
    batch_size: int,
    rng: np.random.Generator,
    min_size: int = 2,
) -> list[np.ndarray]:
    """One shuffled pass over ``range(n)``; a tail shorter than ``min_size`` is dropped."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= min_size]


class _ClassPool:
    """Per-class index queue refilled with a fresh permutation when drained."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator) -> None:
        self.indices = indices
        self.rng = rng
        self.queue: list[int] = []

    def draw(self, k: int) -> list[int]:
        k = min(k, len(self.indices))
        if len(self.queue) < k:
            self.queue = [int(i) for i in self.rng.permutation(self.indices)]
        taken, self.queue = self.queue[:k], self.queue[k:]
        return taken


def class_balanced_batches(
    labels: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """``ceil(N / batch_size)`` batches, each with >= 2 samples of every class it holds.

    When ``batch_size`` cannot hold two of every class, each batch takes a
    rotating subset of ``batch_size // 2`` classes.
    """
    labels = np.asarray(labels)
    if batch_size < 2:
        raise SamplerError(f"balanced batches need batch_size >= 2, got {batch_size}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) == 0:
        raise ContractError("cannot sample from an empty dataset")
    if np.any(counts < 2):
        raise SamplerError(
            f"classes with fewer than 2 samples: {sorted(int(c) for c in classes[counts < 2])}"
        )

    pools = [_ClassPool(np.flatnonzero(labels == c), rng) for c in classes]
    per_batch = min(len(classes), batch_size // 2)
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    class_order = [int(i) for i in rng.permutation(len(classes))]
    cursor = 0

    batches: list[np.ndarray] = []
    for _ in range(n_batches):
        chosen = [class_order[(cursor + j) % len(classes)] for j in range(per_batch)]
        cursor = (cursor + per_batch) % len(classes)
        base, extra = divmod(batch_size, per_batch)
        batch: list[int] = []
        for j, ci in enumerate(chosen):
            batch.extend(pools[ci].draw(base + (1 if j < extra else 0)))
        batches.append(np.array(batch, dtype=np.int64))
    return batches
