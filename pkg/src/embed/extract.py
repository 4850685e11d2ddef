"""Patch embeddings for representation analysis."""

from __future__ import annotations

import numpy as np

from src.observability.logger import get_logger
from src.trainer.checkpoint import Checkpoint
from src.trainer.probe import checkpoint_features

log = get_logger(__name__)


def extract_embeddings(
    ckpt: Checkpoint,
    pixels: np.ndarray,
    labels: np.ndarray,
    use_projection: bool = False,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """(N x D features, labels). Projections (N x d) instead when ``use_projection``."""
    features = checkpoint_features(ckpt, pixels, threads, use_projection=use_projection)
    log.info("embed.extracted", rows=len(features), dim=features.shape[1],
             use_projection=use_projection)
    return features.astype(np.float64), np.asarray(labels).copy()


def stratified_sample(labels: np.ndarray, max_points: int, seed: int = 0) -> np.ndarray:
    """Sorted indices of at most ``max_points`` rows, spread evenly over classes.

    Each class gets an equal share; shares a small class cannot fill pass to
    the remaining classes.
    """
    labels = np.asarray(labels)
    if len(labels) <= max_points:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    quota = dict.fromkeys(classes.tolist(), 0)
    remaining = max_points
    open_classes = classes.tolist()
    available = dict(zip(classes.tolist(), counts.tolist()))
    while remaining > 0 and open_classes:
        share = max(1, remaining // len(open_classes))
        for c in list(open_classes):
            take = min(share, available[c] - quota[c], remaining)
            quota[c] += take
            remaining -= take
            if quota[c] >= available[c]:
                open_classes.remove(c)
            if remaining == 0:
                break
    chosen = [
        rng.choice(np.flatnonzero(labels == c), size=q, replace=False)
        for c, q in quota.items() if q
    ]
    return np.sort(np.concatenate(chosen))
