"""The general contrastive loss and its self-supervised / supervised batch forms.

For an anchor z with positives P and denominator set N (which contains P):

    loss(z) = mean_{p in P} [ -sim(z, p)/tau + log sum_{n in N} exp(sim(z, n)/tau) ]

In batch form every sample is an anchor, its denominator is every other
sample of the batch, and the positive mask decides the regime:
  simclr: the sibling augmented view of the same patch
  supcon: every other sample with the same class label
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from src.errors import ContractError, SamplerError
from src.nn.network import FeatureExtractor
from src.preprocess.augment import AugmentationSpec, augment_batch_pair
from src.preprocess.normalization import ChannelStats
from src.preprocess.tiling import Patch


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")


def contrastive_loss(
    z: np.ndarray,
    positives: Sequence[np.ndarray],
    denominator_set: Sequence[np.ndarray],
    tau: float,
) -> float:
    """Loss of one anchor; ``denominator_set`` must include the positives."""
    _check_tau(tau)
    if len(positives) == 0:
        raise ContractError("contrastive_loss needs at least one positive")
    if len(denominator_set) == 0:
        raise ContractError("contrastive_loss needs a nonempty denominator set")
    z = np.asarray(z, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64) @ z / tau
    den = np.asarray(denominator_set, dtype=np.float64) @ z / tau
    return float(np.mean(logsumexp(den) - pos))


def contrastive_batch_loss(
    z: np.ndarray,
    positive_mask: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Mean anchor loss over a batch of unit embeddings, and d loss / d z.

    ``positive_mask[i, j]`` marks j as a positive of anchor i; the diagonal is
    ignored. Every row needs at least one positive.
    """
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if m < 2:
        raise ContractError(f"contrastive batch needs at least 2 samples, got {m}")
    pos = np.asarray(positive_mask, dtype=bool).copy()
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise SamplerError(
            f"{int((n_pos == 0).sum())} anchors have no positive in the batch"
        )

    s = z @ z.T / tau
    np.fill_diagonal(s, -np.inf)
    lse = logsumexp(s, axis=1)
    s_pos = np.where(pos, s, 0.0)
    per_anchor = lse - s_pos.sum(axis=1) / n_pos
    loss = float(per_anchor.mean())

    attn = np.exp(s - lse[:, None])  # row softmax over j != i
    g = (attn - pos / n_pos[:, None]) / m
    dz = (g + g.T) @ z / tau
    return loss, dz


def simclr_positive_mask(n: int) -> np.ndarray:
    """2n views ordered [first views; second views]; view i pairs with i +/- n."""
    idx = np.arange(2 * n)
    sibling = (idx + n) % (2 * n)
    mask = np.zeros((2 * n, 2 * n), dtype=bool)
    mask[idx, sibling] = True
    return mask


def supcon_positive_mask(labels: Sequence[int] | np.ndarray) -> np.ndarray:
    lab = np.asarray(labels)
    mask = lab[:, None] == lab[None, :]
    np.fill_diagonal(mask, False)
    return mask


def check_supcon_labels(labels: Sequence[int] | np.ndarray) -> None:
    lab = np.asarray(labels)
    values, counts = np.unique(lab, return_counts=True)
    lonely = values[counts < 2]
    if len(lonely):
        raise SamplerError(
            f"classes with a single batch member: {sorted(int(v) for v in lonely)}"
        )


def simclr_loss(z_views: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Kernel over 2N stacked view embeddings."""
    n2 = z_views.shape[0]
    if n2 % 2 or n2 < 4:
        raise ContractError(f"simclr needs 2N views with N >= 2, got {n2}")
    return contrastive_batch_loss(z_views, simclr_positive_mask(n2 // 2), tau)


def supcon_loss(
    z: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    check_supcon_labels(labels)
    return contrastive_batch_loss(z, supcon_positive_mask(labels), tau)


def _pixels(batch: Union[np.ndarray, Sequence[Patch]]) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch
    return np.stack([p.pixels for p in batch])


def simclr_batch_loss(
    batch: Union[np.ndarray, Sequence[Patch]],
    model: FeatureExtractor,
    tau: float,
    rng_seed: int,
    spec: Optional[AugmentationSpec] = None,
    stats: Optional[ChannelStats] = None,
) -> float:
    """Self-supervised loss of N patches: 2N augmented views, sibling as positive."""
    pixels = _pixels(batch)
    if len(pixels) < 2:
        raise ContractError(f"simclr batch needs N >= 2 patches, got {len(pixels)}")
    first, second = augment_batch_pair(pixels, rng_seed, spec or AugmentationSpec())
    views = np.concatenate([first, second], axis=0)
    if stats is not None:
        views = stats.apply(views)
    _, z = model.forward(views, cache=False)
    loss, _ = simclr_loss(z, tau)  # type: ignore[arg-type]
    return loss


def supcon_batch_loss(
    batch: Union[np.ndarray, Sequence[Patch]],
    labels: Sequence[int] | np.ndarray,
    model: FeatureExtractor,
    tau: float,
    stats: Optional[ChannelStats] = None,
) -> float:
    """Supervised loss of N labeled patches: same-class others are positives."""
    pixels = _pixels(batch)
    if stats is not None:
        pixels = stats.apply(pixels)
    _, z = model.forward(pixels, cache=False)
    loss, _ = supcon_loss(z, labels, tau)  # type: ignore[arg-type]
    return loss
