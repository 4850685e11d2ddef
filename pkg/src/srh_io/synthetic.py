"""Deterministic synthetic SRH slides standing in for the clinical cohort.

Each class owns one parametric texture family (``TEXTURES``):
  - a background of anisotropic Gaussian-filtered noise,
  - "nuclei": Poisson-placed Gaussian spots with class-specific density,
    radius and elongation,
  - optional rings (meningioma whorls, pituitary acini),
mapped onto the two Raman channels with class-specific means and spreads.
The 2930 cm-1 channel follows the cellular field; the 2845 cm-1 channel is
lipid signal, partly anti-correlated with it.

All intensities below are fractions of the 16-bit full scale. Every
function is a pure function of its seeds and arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from src.errors import LabelError, SlideSizeError
from src.srh_io.labels import NONTUMOR_CLASSES, TUMOR_CLASSES, ClassLabel
from src.srh_io.slide_format import RawSrhImage

FULL_SCALE = 65535.0
DEFAULT_SLIDE_SIDE = 900
DEFAULT_PATCH_SIDE = 300

# Per-patient offset applied to both channel means, uniform in +-PATIENT_JITTER.
PATIENT_JITTER = 0.01


@dataclass(frozen=True)
class TextureParams:
    lipid_mean: float        # ch2845 mean
    protein_mean: float      # ch2930 mean
    lipid_std: float
    protein_std: float
    spot_density: float      # nuclei per 10^4 px
    spot_radius: float       # px
    elongation: float        # nucleus length / width (spindle cells > 1)
    base_sigma: float        # background correlation length, px
    base_weight: float       # share of background noise in the cellular field
    ring_density: float = 0.0   # rings per 10^5 px
    ring_radius: float = 0.0
    ring_width: float = 2.0


TEXTURES: dict[ClassLabel, TextureParams] = {
    # monotonous hypercellularity, loss of acinar structure
    ClassLabel.PITUITARY_ADENOMA: TextureParams(
        lipid_mean=0.18, protein_mean=0.56, lipid_std=0.04, protein_std=0.07,
        spot_density=60.0, spot_radius=2.5, elongation=1.0,
        base_sigma=2.0, base_weight=0.3,
    ),
    # dense round nuclei plus rare large whorls
    ClassLabel.MENINGIOMA: TextureParams(
        lipid_mean=0.28, protein_mean=0.50, lipid_std=0.04, protein_std=0.08,
        spot_density=45.0, spot_radius=3.0, elongation=1.0,
        base_sigma=2.0, base_weight=0.3,
        ring_density=2.0, ring_radius=18.0, ring_width=2.5,
    ),
    # spindle cells, fascicular background
    ClassLabel.SCHWANNOMA: TextureParams(
        lipid_mean=0.32, protein_mean=0.60, lipid_std=0.05, protein_std=0.07,
        spot_density=30.0, spot_radius=2.5, elongation=3.5,
        base_sigma=3.0, base_weight=0.5,
    ),
    # sheets of small discohesive cells
    ClassLabel.LYMPHOMA: TextureParams(
        lipid_mean=0.14, protein_mean=0.64, lipid_std=0.03, protein_std=0.08,
        spot_density=110.0, spot_radius=1.8, elongation=1.0,
        base_sigma=1.5, base_weight=0.2,
    ),
    # large pleomorphic nuclei
    ClassLabel.METASTASIS: TextureParams(
        lipid_mean=0.23, protein_mean=0.47, lipid_std=0.05, protein_std=0.09,
        spot_density=18.0, spot_radius=5.0, elongation=1.3,
        base_sigma=4.0, base_weight=0.4,
    ),
    # sparse large somata over lipid-rich background
    ClassLabel.NORMAL_BRAIN: TextureParams(
        lipid_mean=0.48, protein_mean=0.30, lipid_std=0.05, protein_std=0.06,
        spot_density=8.0, spot_radius=6.0, elongation=1.0,
        base_sigma=5.0, base_weight=0.5,
    ),
    # acinar architecture
    ClassLabel.NORMAL_PITUITARY: TextureParams(
        lipid_mean=0.34, protein_mean=0.36, lipid_std=0.04, protein_std=0.06,
        spot_density=35.0, spot_radius=2.5, elongation=1.0,
        base_sigma=3.0, base_weight=0.3,
        ring_density=12.0, ring_radius=10.0, ring_width=2.0,
    ),
    # acellular dura / blank field: near-background, low variance
    ClassLabel.NONDIAGNOSTIC: TextureParams(
        lipid_mean=0.14, protein_mean=0.10, lipid_std=0.003, protein_std=0.003,
        spot_density=0.0, spot_radius=1.0, elongation=1.0,
        base_sigma=6.0, base_weight=1.0,
    ),
}


def _standardize(x: np.ndarray) -> np.ndarray:
    std = float(x.std())
    if std < 1e-12:
        return np.zeros_like(x)
    return (x - float(x.mean())) / std


def _class_rng(label: ClassLabel, *seeds: int) -> np.random.Generator:
    return np.random.default_rng([label.class_index, *seeds])


def _spot_field(
    rng: np.random.Generator,
    shape: tuple[int, int],
    params: TextureParams,
    along_rows: bool,
) -> np.ndarray:
    h, w = shape
    field = np.zeros(shape, dtype=np.float64)
    n_spots = rng.poisson(params.spot_density * h * w / 1e4)
    if n_spots:
        rows = rng.integers(0, h, size=n_spots)
        cols = rng.integers(0, w, size=n_spots)
        amps = rng.uniform(0.7, 1.3, size=n_spots)
        np.add.at(field, (rows, cols), amps)
        long_axis = params.spot_radius * params.elongation
        sigma = (long_axis, params.spot_radius) if along_rows else (params.spot_radius, long_axis)
        field = ndimage.gaussian_filter(field, sigma=sigma, mode="wrap")

    n_rings = rng.poisson(params.ring_density * h * w / 1e5) if params.ring_density else 0
    for _ in range(n_rings):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = params.ring_radius * rng.uniform(0.8, 1.2)
        reach = radius + 3 * params.ring_width
        r0, r1 = max(0, int(cy - reach)), min(h, int(cy + reach) + 1)
        c0, c1 = max(0, int(cx - reach)), min(w, int(cx + reach) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dist = np.hypot(yy - cy, xx - cx)
        field[r0:r1, c0:c1] += np.exp(-((dist - radius) ** 2) / (2 * params.ring_width ** 2))
    return field


def _texture(
    label: ClassLabel,
    patient_seed: int,
    slide_seed: int,
    height: int,
    width: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Float channels (ch2845, ch2930) as fractions of full scale, unclipped."""
    params = TEXTURES[label]
    patient_rng = _class_rng(label, patient_seed)
    lipid_shift, protein_shift = patient_rng.uniform(-PATIENT_JITTER, PATIENT_JITTER, size=2)
    along_rows = bool(patient_rng.integers(0, 2))

    rng = _class_rng(label, patient_seed, slide_seed)
    shape = (height, width)
    aniso = max(1.0, params.elongation / 2)
    base_sigma = (params.base_sigma * aniso, params.base_sigma) if along_rows else (
        params.base_sigma, params.base_sigma * aniso)
    base = _standardize(
        ndimage.gaussian_filter(rng.standard_normal(shape), base_sigma, mode="wrap")
    )
    spots = _standardize(_spot_field(rng, shape, params, along_rows))
    cellular = _standardize(params.base_weight * base + (1 - params.base_weight) * spots)

    lipid_noise = _standardize(
        ndimage.gaussian_filter(rng.standard_normal(shape), 2 * params.base_sigma, mode="wrap")
    )
    lipid = _standardize(-0.6 * cellular + 0.8 * lipid_noise)

    ch2930 = params.protein_mean + protein_shift + params.protein_std * cellular
    ch2845 = params.lipid_mean + lipid_shift + params.lipid_std * lipid
    return ch2845, ch2930


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * FULL_SCALE), 0, FULL_SCALE).astype(np.uint16)


def _check_dims(height: int, width: int, patch_side: int) -> None:
    if height < patch_side or width < patch_side:
        raise SlideSizeError(
            f"slide {height}x{width} is smaller than patch side {patch_side}"
        )


def generate_synthetic_slide(
    label: ClassLabel,
    patient_seed: int,
    slide_seed: int,
    height: int = DEFAULT_SLIDE_SIDE,
    width: int = DEFAULT_SLIDE_SIDE,
    patch_side: int = DEFAULT_PATCH_SIDE,
) -> RawSrhImage:
    """One slide of ``label`` texture; slides sharing ``patient_seed`` share a patient."""
    label = ClassLabel.parse(label)
    _check_dims(height, width, patch_side)
    ch2845, ch2930 = _texture(label, patient_seed, slide_seed, height, width)
    return RawSrhImage.from_channels(_quantize(ch2845), _quantize(ch2930))


def _boundary_mask(
    rng: np.random.Generator,
    n_lines: int,
    line_len: int,
    fraction: float,
) -> np.ndarray:
    """(n_lines, line_len) mask, True before a smooth per-line cut position."""
    wiggle = ndimage.gaussian_filter1d(rng.standard_normal(n_lines), sigma=max(1.0, n_lines / 8))
    wiggle = _standardize(wiggle) * 0.12 * line_len
    target = fraction * line_len
    cut = np.clip(target + wiggle, 0, line_len)
    cut = np.clip(cut + (target - cut.mean()), 0, line_len)
    positions = np.arange(line_len)[None, :]
    return positions < cut[:, None]


def margin_mask(
    mask_seed: int,
    height: int,
    width: int,
    fraction: float = 0.5,
) -> np.ndarray:
    """Tumor mask split from the rest by one smooth random boundary."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    rng = np.random.default_rng([0x5EED, mask_seed])
    vertical = bool(rng.integers(0, 2))
    flip = bool(rng.integers(0, 2))
    if vertical:
        mask = _boundary_mask(rng, height, width, fraction)
    else:
        mask = _boundary_mask(rng, width, height, fraction).T
    if flip:
        mask = mask[::-1, ::-1]
    return np.ascontiguousarray(mask)


def _check_margin_labels(tumor: ClassLabel, nontumor: ClassLabel) -> tuple[ClassLabel, ClassLabel]:
    tumor = ClassLabel.parse(tumor)
    nontumor = ClassLabel.parse(nontumor)
    if tumor not in TUMOR_CLASSES:
        raise LabelError(f"{tumor.value} is not a tumor class")
    if nontumor not in NONTUMOR_CLASSES:
        raise LabelError(f"{nontumor.value} is not a nontumor class")
    return tumor, nontumor


def _compose(
    tumor: ClassLabel,
    nontumor: ClassLabel,
    seed: int,
    height: int,
    width: int,
    mask: np.ndarray,
) -> RawSrhImage:
    t2845, t2930 = _texture(tumor, seed, 1, height, width)
    n2845, n2930 = _texture(nontumor, seed, 2, height, width)
    return RawSrhImage.from_channels(
        _quantize(np.where(mask, t2845, n2845)),
        _quantize(np.where(mask, t2930, n2930)),
    )


def generate_synthetic_margin_slide(
    tumor: ClassLabel,
    nontumor: ClassLabel,
    mask_seed: int,
    height: int = DEFAULT_SLIDE_SIDE,
    width: int = DEFAULT_SLIDE_SIDE,
    fraction: float = 0.5,
    patch_side: int = DEFAULT_PATCH_SIDE,
) -> tuple[RawSrhImage, np.ndarray]:
    """Tumor/nontumor margin slide and the pixel-exact tumor mask used."""
    tumor, nontumor = _check_margin_labels(tumor, nontumor)
    _check_dims(height, width, patch_side)
    mask = margin_mask(mask_seed, height, width, fraction)
    return _compose(tumor, nontumor, mask_seed, height, width, mask), mask


def infiltration_mask(
    seed: int,
    height: int,
    width: int,
    n_islands: int = 2,
    island_radius: int | None = None,
    max_fraction: float = 0.10,
) -> np.ndarray:
    """Disjoint disc-shaped islands covering at most ``max_fraction`` of the slide."""
    radius = island_radius if island_radius is not None else max(2, min(height, width) // 8)
    rng = np.random.default_rng([0x1515, seed])
    yy, xx = np.mgrid[0:height, 0:width]
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(n_islands):
        for _attempt in range(50):
            cy = rng.uniform(radius, max(radius + 1, height - radius))
            cx = rng.uniform(radius, max(radius + 1, width - radius))
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            # islands stay apart so each one is a separate focus
            halo = (yy - cy) ** 2 + (xx - cx) ** 2 <= (2 * radius) ** 2
            if mask[halo].any():
                continue
            if (mask.sum() + disc.sum()) / mask.size > max_fraction:
                break
            mask |= disc
            break
    return mask


def generate_synthetic_infiltration_slide(
    tumor: ClassLabel,
    nontumor: ClassLabel,
    seed: int,
    height: int = DEFAULT_SLIDE_SIDE,
    width: int = DEFAULT_SLIDE_SIDE,
    n_islands: int = 2,
    island_radius: int | None = None,
    patch_side: int = DEFAULT_PATCH_SIDE,
) -> tuple[RawSrhImage, np.ndarray]:
    """Mostly-nontumor slide with small implanted tumor islands, plus their mask."""
    tumor, nontumor = _check_margin_labels(tumor, nontumor)
    _check_dims(height, width, patch_side)
    mask = infiltration_mask(seed, height, width, n_islands, island_radius)
    return _compose(tumor, nontumor, seed, height, width, mask), mask


def channel_signature(label: ClassLabel) -> dict[str, float]:
    """Expected per-channel (mean, variance) of a slide, from the parameter table."""
    p = TEXTURES[ClassLabel.parse(label)]
    return {
        "ch2845_mean": p.lipid_mean,
        "ch2930_mean": p.protein_mean,
        "ch2845_var": p.lipid_std ** 2,
        "ch2930_var": p.protein_std ** 2,
    }
