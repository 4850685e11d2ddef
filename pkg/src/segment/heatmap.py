"""Whole-slide probability heatmaps from overlapping patch predictions.

Every pixel's distribution is the unweighted mean of the distributions of
all patches covering it. Pixels no patch covers are flagged through the
coverage count and come back as NaN from ``probabilities``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Union

import numpy as np

from src.config import PreprocessConfig
from src.errors import ContractError, ShapeError
from src.evaluate.aggregation import soft_aggregate
from src.observability.logger import get_logger
from src.preprocess.channels import to_three_channel
from src.preprocess.dataset import model_patches
from src.srh_io.slide_format import RawSrhImage

log = get_logger(__name__)


class PatchPredictor(Protocol):
    def predict(self, pixels: np.ndarray, threads: int = 1) -> np.ndarray: ...


@dataclass
class Heatmap:
    sums: np.ndarray        # (K, H, W) float64 summed patch distributions
    coverage: np.ndarray    # (H, W) int32 number of covering patches
    patch_dists: np.ndarray  # (P, K) per-patch distributions, tiling order
    offsets: np.ndarray     # (P, 2)
    patch_side: int
    stride: int

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.coverage.shape[0]), int(self.coverage.shape[1])

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0

    def probabilities(self) -> np.ndarray:
        """(K, H, W) per-pixel mean distribution; NaN where uncovered."""
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.sums / self.coverage[None].astype(np.float64)
        out[:, ~self.covered] = np.nan
        return out

    def slide_distribution(self) -> np.ndarray:
        """Soft aggregate of every patch on the slide."""
        return soft_aggregate(self.patch_dists)

    def coverage_stats(self) -> dict[str, float]:
        cov = self.coverage
        return {
            "patches": int(len(self.patch_dists)),
            "covered_fraction": float(self.covered.mean()),
            "min_coverage": int(cov.min()),
            "max_coverage": int(cov.max()),
            "mean_coverage": float(cov[self.covered].mean()) if self.covered.any() else 0.0,
        }


def accumulate_heatmap(
    patch_dists: np.ndarray,
    offsets: np.ndarray,
    patch_side: int,
    height: int,
    width: int,
    stride: int = 0,
) -> Heatmap:
    """Fuse per-patch distributions placed at ``offsets`` into a Heatmap."""
    dists = np.asarray(patch_dists, dtype=np.float64)
    offs = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    if dists.ndim != 2 or len(dists) != len(offs):
        raise ShapeError(f"{len(dists)} distributions for {len(offs)} offsets")
    k = dists.shape[1]
    sums = np.zeros((k, height, width), dtype=np.float64)
    coverage = np.zeros((height, width), dtype=np.int32)
    # sequential in tiling order, so the result does not depend on inference scheduling
    for (r, c), d in zip(offs, dists):
        sums[:, r:r + patch_side, c:c + patch_side] += d[:, None, None]
        coverage[r:r + patch_side, c:c + patch_side] += 1
    return Heatmap(sums, coverage, dists, offs, patch_side, stride)


def probability_heatmap(
    slide: Union[RawSrhImage, np.ndarray],
    predictor: PatchPredictor,
    stride: int,
    cfg: PreprocessConfig,
    threads: int = 1,
) -> Heatmap:
    """Tile the slide at ``stride``, predict every patch and fuse the results."""
    if stride < 1 or stride > cfg.patch_side:
        raise ContractError(
            f"segmentation stride must be in [1, patch_side={cfg.patch_side}], got {stride}"
        )
    image = to_three_channel(slide) if isinstance(slide, RawSrhImage) else slide
    _, height, width = image.shape
    patches, _ = model_patches(image, cfg, stride=stride)
    pixels = np.stack([p.pixels for p in patches])
    dists = predictor.predict(pixels, threads)
    heatmap = accumulate_heatmap(
        dists, np.array([p.offset for p in patches]), cfg.patch_side, height, width, stride
    )
    log.info("segment.heatmap", patches=len(patches), stride=stride, **{
        k: v for k, v in heatmap.coverage_stats().items() if k != "patches"
    })
    return heatmap

