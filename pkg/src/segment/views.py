"""Channel views of a Heatmap.

The two-channel view picks the slide's most probable tumor class and most
probable nontumor class from the slide-level soft aggregate and shows those
two classes' per-pixel probabilities. The three-channel view sums the
per-pixel probabilities into tumor / normal / nondiagnostic planes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.segment.heatmap import Heatmap
from src.srh_io.labels import (
    NONTUMOR_INDICES,
    TUMOR_INDICES,
    ClassLabel,
)

_NORMAL = (ClassLabel.NORMAL_BRAIN.class_index, ClassLabel.NORMAL_PITUITARY.class_index)
_ND = ClassLabel.NONDIAGNOSTIC.class_index


@dataclass
class TwoChannelView:
    tumor: np.ndarray      # (H, W) probability of tumor_class, NaN where uncovered
    nontumor: np.ndarray   # (H, W) probability of nontumor_class, NaN where uncovered
    tumor_class: ClassLabel
    nontumor_class: ClassLabel

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.tumor.shape[0]), int(self.tumor.shape[1])

    @property
    def covered(self) -> np.ndarray:
        return ~np.isnan(self.tumor)

    def tumor_mask(self) -> np.ndarray:
        """Per-pixel argmax between the two channels; ties go to nontumor."""
        with np.errstate(invalid="ignore"):
            return np.nan_to_num(self.tumor, nan=0.0) > np.nan_to_num(self.nontumor, nan=0.0)


def _best_of(dist: np.ndarray, indices: tuple[int, ...]) -> int:
    # first maximum wins, so ties go to the lower class index
    return indices[int(np.argmax(dist[list(indices)]))]


def two_channel_view(h: Heatmap) -> TwoChannelView:
    slide = h.slide_distribution()
    t_idx = _best_of(slide, tuple(TUMOR_INDICES))
    n_idx = _best_of(slide, tuple(NONTUMOR_INDICES))
    probs = h.probabilities()
    return TwoChannelView(
        tumor=probs[t_idx],
        nontumor=probs[n_idx],
        tumor_class=ClassLabel.from_index(t_idx),
        nontumor_class=ClassLabel.from_index(n_idx),
    )


def three_channel_view(h: Heatmap) -> np.ndarray:
    """(3, H, W): summed tumor, normal tissue and nondiagnostic probabilities."""
    probs = h.probabilities()
    return np.stack([
        probs[list(TUMOR_INDICES)].sum(axis=0),
        probs[list(_NORMAL)].sum(axis=0),
        probs[_ND],
    ])


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two boolean masks (1.0 when both are empty)."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def island_recall(view: TwoChannelView, islands: np.ndarray, threshold: float = 0.5) -> float:
    """Share of island pixels whose tumor channel exceeds ``threshold``."""
    islands = np.asarray(islands, dtype=bool)
    if not islands.any():
        return 1.0
    tumor = np.nan_to_num(view.tumor, nan=0.0)
    return float((tumor[islands] > threshold).mean())
