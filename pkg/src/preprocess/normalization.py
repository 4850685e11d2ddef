"""Per-channel standardization fitted on the training split only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from src.errors import ContractError, ShapeError

_MIN_STD = 1.0e-6


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def fit(cls, batches: Iterable[np.ndarray]) -> ChannelStats:
        """Accumulate per-channel moments over (N, 3, s, s) or (3, s, s) arrays."""
        total = np.zeros(3, dtype=np.float64)
        total_sq = np.zeros(3, dtype=np.float64)
        count = 0
        for arr in batches:
            x = np.asarray(arr, dtype=np.float64)
            if x.ndim == 3:
                x = x[None]
            if x.ndim != 4 or x.shape[1] != 3:
                raise ShapeError(f"expected (N, 3, s, s) pixels, got {x.shape}")
            total += x.sum(axis=(0, 2, 3))
            total_sq += np.square(x).sum(axis=(0, 2, 3))
            count += x.shape[0] * x.shape[2] * x.shape[3]
        if count == 0:
            raise ContractError("cannot fit channel statistics on zero pixels")
        mean = total / count
        var = np.maximum(total_sq / count - np.square(mean), 0.0)
        std = np.maximum(np.sqrt(var), _MIN_STD)
        return cls(
            mean=tuple(float(v) for v in mean),  # type: ignore[arg-type]
            std=tuple(float(v) for v in std),  # type: ignore[arg-type]
        )

    @classmethod
    def identity(cls) -> ChannelStats:
        return cls(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))

    def apply(self, pixels: np.ndarray, dtype: Any = np.float32) -> np.ndarray:
        """Standardize (..., 3, s, s) pixels channel-wise."""
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3, 1, 1)
        std = np.asarray(self.std, dtype=np.float64).reshape(3, 1, 1)
        return ((np.asarray(pixels, dtype=np.float64) - mean) / std).astype(dtype)

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ChannelStats:
        mean, std = data["mean"], data["std"]
        if len(mean) != 3 or len(std) != 3:
            raise ShapeError("channel statistics need exactly 3 means and 3 stds")
        return cls(
            mean=(float(mean[0]), float(mean[1]), float(mean[2])),
            std=(float(std[0]), float(std[1]), float(std[2])),
        )
