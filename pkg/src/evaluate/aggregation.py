"""Patch -> slide / patient aggregation of probability distributions."""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from src.errors import ContractError
from src.srh_io.labels import ClassLabel

ProbDists = Union[np.ndarray, Sequence[Sequence[float]]]


def _stack(dists: ProbDists) -> np.ndarray:
    arr = np.asarray(dists, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("aggregation needs a nonempty list of distributions")
    return arr


def soft_aggregate(dists: ProbDists) -> np.ndarray:
    """Sum the distributions and renormalize (the arithmetic mean)."""
    arr = _stack(dists)
    total = arr.sum(axis=0)
    return total / total.sum()


def argmax_index(dist: np.ndarray) -> int:
    """Argmax with ties broken by the lowest class index."""
    return int(np.argmax(dist))


def majority_vote_index(dists: ProbDists) -> int:
    arr = _stack(dists)
    votes = np.bincount(arr.argmax(axis=1), minlength=arr.shape[1])
    return int(np.argmax(votes))


def majority_vote(dists: ProbDists) -> ClassLabel:
    """Modal per-patch argmax; ties go to the lowest class index."""
    return ClassLabel.from_index(majority_vote_index(dists))


def group_indices(keys: Sequence[str] | np.ndarray) -> dict[str, np.ndarray]:
    """Row indices per key, keys in sorted order."""
    arr = np.asarray(keys)
    return {str(k): np.flatnonzero(arr == k) for k in sorted(set(arr.tolist()))}
