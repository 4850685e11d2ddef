"""Raw two-channel slides -> virtual 3-channel images.

R = max(ch2930 - ch2845, 0), G = ch2845, B = ch2930, each / 65535.
The subtracted channel highlights cellularity. Arrays are channel-first
(3, H, W) float32.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from src.srh_io.slide_format import RawSrhImage

FULL_SCALE = 65535.0


def to_three_channel(img: RawSrhImage) -> np.ndarray:
    lipid = img.ch2845.astype(np.float64)
    protein = img.ch2930.astype(np.float64)
    out = np.empty((3, img.height, img.width), dtype=np.float32)
    out[0] = np.maximum(protein - lipid, 0.0) / FULL_SCALE
    out[1] = lipid / FULL_SCALE
    out[2] = protein / FULL_SCALE
    return out


def resize_square(x: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a (C, h, w) array to (C, side, side), corners aligned."""
    c, h, w = x.shape
    if (h, w) == (side, side):
        return x.copy()
    rows = np.linspace(0.0, h - 1.0, side)
    cols = np.linspace(0.0, w - 1.0, side)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((c, side, side), dtype=x.dtype)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(x[ch], [rr, cc], order=1, mode="nearest")
    return out


def downsample(x: np.ndarray, side: int) -> np.ndarray:
    """Area-average a (C, s, s) patch to (C, side, side).

    Exact block means when ``side`` divides ``s``, bilinear resize otherwise.
    """
    c, h, w = x.shape
    if h == side and w == side:
        return x.copy()
    if h == w and h % side == 0:
        f = h // side
        return x.reshape(c, side, f, side, f).mean(axis=(2, 4)).astype(x.dtype)
    return resize_square(x, side)
