"""Stochastic patch transformations for contrastive views.

A composition samples every enabled transformation in a fixed order:
hflip -> vflip -> crop-resize -> blur -> intensity jitter. Two independent
compositions drawn from one seeded generator give the (t1, t2) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from src.config import AugmentationConfig
from src.preprocess.channels import resize_square
from src.preprocess.tiling import Patch


@dataclass(frozen=True)
class AugmentationSpec:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    blur_sigma_max: float = 1.5
    crop_scale_min: float = 0.7
    intensity_jitter: float = 0.10
    transforms: frozenset[str] = field(
        default_factory=lambda: frozenset({"hflip", "vflip", "blur", "crop", "jitter"})
    )

    @classmethod
    def from_config(cls, cfg: AugmentationConfig) -> AugmentationSpec:
        return cls(
            hflip_p=cfg.hflip_p,
            vflip_p=cfg.vflip_p,
            blur_sigma_max=cfg.blur_sigma_max,
            crop_scale_min=cfg.crop_scale_min,
            intensity_jitter=cfg.intensity_jitter,
            transforms=frozenset(cfg.transforms),
        )

    @classmethod
    def identity(cls) -> AugmentationSpec:
        return cls(transforms=frozenset())

    @classmethod
    def flips_only(cls) -> AugmentationSpec:
        return cls(transforms=frozenset({"hflip", "vflip"}))


def augment_pixels(
    pixels: np.ndarray,
    rng: np.random.Generator,
    spec: AugmentationSpec,
) -> np.ndarray:
    """Apply one sampled composition to a (3, s, s) array; shape is preserved."""
    x = pixels
    side = x.shape[-1]
    t = spec.transforms

    if "hflip" in t and rng.random() < spec.hflip_p:
        x = x[:, :, ::-1]
    if "vflip" in t and rng.random() < spec.vflip_p:
        x = x[:, ::-1, :]
    if "crop" in t:
        scale = rng.uniform(spec.crop_scale_min, 1.0)
        crop = max(2, min(side, int(round(side * np.sqrt(scale)))))
        top = int(rng.integers(0, side - crop + 1))
        left = int(rng.integers(0, side - crop + 1))
        x = resize_square(np.ascontiguousarray(x[:, top:top + crop, left:left + crop]), side)
    if "blur" in t:
        sigma = rng.uniform(0.0, spec.blur_sigma_max)
        if sigma > 0:
            x = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect")
    if "jitter" in t:
        j = spec.intensity_jitter
        factors = rng.uniform(1.0 - j, 1.0 + j, size=(x.shape[0], 1, 1))
        x = np.clip(x * factors, 0.0, 1.0)
    return np.ascontiguousarray(x, dtype=pixels.dtype)


def augment_pair(
    p: Patch,
    rng_seed: int,
    spec: AugmentationSpec | None = None,
) -> tuple[Patch, Patch]:
    """Two independently transformed views of ``p``; deterministic given the seed."""
    spec = spec or AugmentationSpec()
    rng = np.random.default_rng(rng_seed)
    first = augment_pixels(p.pixels, rng, spec)
    second = augment_pixels(p.pixels, rng, spec)
    return p.with_pixels(first), p.with_pixels(second)


def augment_batch_pair(
    pixels: np.ndarray,
    rng_seed: int,
    spec: AugmentationSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Two views of every (3, s, s) item of an (N, 3, s, s) batch."""
    rng = np.random.default_rng(rng_seed)
    seeds = rng.integers(0, 2**31 - 1, size=len(pixels))
    first = np.empty_like(pixels)
    second = np.empty_like(pixels)
    for i, seed in enumerate(seeds):
        item_rng = np.random.default_rng(int(seed))
        first[i] = augment_pixels(pixels[i], item_rng, spec)
        second[i] = augment_pixels(pixels[i], item_rng, spec)
    return first, second


def augment_batch(
    pixels: np.ndarray,
    rng_seed: int,
    spec: AugmentationSpec,
) -> np.ndarray:
    """One view of every item of an (N, 3, s, s) batch."""
    rng = np.random.default_rng(rng_seed)
    seeds = rng.integers(0, 2**31 - 1, size=len(pixels))
    out = np.empty_like(pixels)
    for i, seed in enumerate(seeds):
        out[i] = augment_pixels(pixels[i], np.random.default_rng(int(seed)), spec)
    return out
