"""Sliding-window tiling of virtual 3-channel slides into patches.

Offsets are (i*stride, j*stride) for every window that fits entirely
inside the image; right/bottom remainders are discarded, never padded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.errors import ContractError, SlideSizeError
from src.srh_io.labels import ClassLabel


@dataclass(frozen=True, eq=False)
class Patch:
    """A (3, side, side) float tile with provenance."""
    pixels: np.ndarray
    slide_id: str = ""
    patient_id: str = ""
    offset: tuple[int, int] = (0, 0)
    label: Optional[ClassLabel] = None

    @property
    def side(self) -> int:
        return int(self.pixels.shape[-1])

    def with_pixels(self, pixels: np.ndarray) -> Patch:
        """Same provenance and label, new pixels."""
        return replace(self, pixels=pixels)


def grid_offsets(height: int, width: int, patch_side: int, stride: int) -> list[tuple[int, int]]:
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if patch_side > height or patch_side > width:
        raise SlideSizeError(
            f"patch side {patch_side} exceeds image {height}x{width}"
        )
    rows = range(0, height - patch_side + 1, stride)
    cols = range(0, width - patch_side + 1, stride)
    return [(r, c) for r in rows for c in cols]


def tile(
    image: np.ndarray,
    patch_side: int,
    stride: int,
    slide_id: str = "",
    patient_id: str = "",
    label: Optional[ClassLabel] = None,
) -> list[Patch]:
    """Cut a (3, H, W) image into copied patches, row-major over offsets."""
    _, height, width = image.shape
    return [
        Patch(
            pixels=image[:, r:r + patch_side, c:c + patch_side].copy(),
            slide_id=slide_id,
            patient_id=patient_id,
            offset=(r, c),
            label=label,
        )
        for r, c in grid_offsets(height, width, patch_side, stride)
    ]


def reassemble(patches: list[Patch], height: int, width: int) -> np.ndarray:
    """Paste patches back at their offsets; uncovered pixels stay zero."""
    if not patches:
        return np.zeros((3, height, width), dtype=np.float32)
    out = np.zeros((patches[0].pixels.shape[0], height, width), dtype=patches[0].pixels.dtype)
    for p in patches:
        r, c = p.offset
        out[:, r:r + p.side, c:c + p.side] = p.pixels
    return out
