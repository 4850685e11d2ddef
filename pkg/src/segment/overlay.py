"""PNG rendering of segmentation results.

Outputs per slide:
  <stem>_tumor.png, <stem>_nontumor.png   16-bit grayscale probability planes
  <stem>_coverage.png                     8-bit, 255 where any patch covers
  <stem>_overlay.png                      8-bit RGBA transparency overlay
  <stem>_rgb.png                          8-bit RGB three-channel view (rgb mode)
  <stem>_segment.json                     sidecar
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from PIL import Image

from src.errors import ShapeError
from src.observability.logger import get_logger
from src.observability.reports import write_json_report
from src.segment.heatmap import Heatmap
from src.segment.views import TwoChannelView, mask_iou, three_channel_view

log = get_logger(__name__)

BaseMode = Literal["gray", "he"]

# Optical-density stain vectors for the virtual H&E lookup (R, G, B).
_HEMATOXYLIN_OD = np.array([0.65, 0.70, 0.29])
_EOSIN_OD = np.array([0.07, 0.99, 0.11])
_H_GAIN = 2.2
_E_GAIN = 1.4


def _stretch(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def grayscale_base(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 gray from the mean of the two Raman channels, min-max stretched."""
    gray = _stretch(0.5 * (image[1].astype(np.float64) + image[2].astype(np.float64)))
    g = np.rint(gray * 255.0).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def _he_lut() -> np.ndarray:
    """256 x 256 x 3 lookup: (cellularity level, lipid level) -> RGB."""
    levels = np.linspace(0.0, 1.0, 256)
    h = levels[:, None, None] * _H_GAIN * _HEMATOXYLIN_OD
    e = levels[None, :, None] * _E_GAIN * _EOSIN_OD
    return np.rint(255.0 * np.exp(-(h + e))).astype(np.uint8)


_HE_LUT = _he_lut()


def he_base(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 virtual H&E: subtracted channel -> hematoxylin, lipid -> eosin."""
    cell = np.rint(_stretch(image[0].astype(np.float64)) * 255.0).astype(np.intp)
    lipid = np.rint(_stretch(image[1].astype(np.float64)) * 255.0).astype(np.intp)
    return _HE_LUT[cell, lipid]


def _encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def blend_overlay(
    base_rgb: np.ndarray,
    view: TwoChannelView,
    alpha: float,
) -> np.ndarray:
    """(H, W, 4) uint8: red = tumor, blue = nontumor, alpha-blended over the base."""
    if base_rgb.shape[:2] != view.shape:
        raise ShapeError(f"base {base_rgb.shape[:2]} does not match heatmap {view.shape}")
    covered = view.covered
    color = np.zeros(base_rgb.shape, dtype=np.float64)
    color[..., 0] = np.nan_to_num(view.tumor, nan=0.0) * 255.0
    color[..., 2] = np.nan_to_num(view.nontumor, nan=0.0) * 255.0
    base = base_rgb.astype(np.float64)
    mixed = (1.0 - alpha) * base + alpha * color
    mixed[~covered] = base[~covered]
    rgba = np.empty(base_rgb.shape[:2] + (4,), dtype=np.uint8)
    rgba[..., :3] = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
    rgba[..., 3] = 255
    return rgba


def render_overlay(
    image: np.ndarray,
    view: TwoChannelView,
    alpha: float = 0.5,
    base: BaseMode = "gray",
) -> bytes:
    """8-bit RGBA PNG of the two-channel view over the slide's 3-channel image."""
    if image.ndim != 3 or image.shape[1:] != view.shape:
        raise ShapeError(f"image {image.shape} does not match heatmap {view.shape}")
    base_rgb = he_base(image) if base == "he" else grayscale_base(image)
    return _encode_png(blend_overlay(base_rgb, view, alpha))


def probability_png16(plane: np.ndarray) -> bytes:
    """16-bit grayscale PNG of a probability plane; uncovered pixels are 0."""
    q = np.rint(np.clip(np.nan_to_num(plane, nan=0.0), 0.0, 1.0) * 65535.0).astype(np.uint16)
    return _encode_png(q)


def rgb_heatmap_png(h: Heatmap) -> bytes:
    planes = np.nan_to_num(three_channel_view(h), nan=0.0)
    rgb = np.rint(np.clip(planes, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return _encode_png(np.ascontiguousarray(rgb))


def write_segmentation(
    out_dir: str | Path,
    stem: str,
    image: np.ndarray,
    heatmap: Heatmap,
    view: TwoChannelView,
    alpha: float = 0.5,
    mode: str = "two",
    base: BaseMode = "gray",
    truth_mask: Optional[np.ndarray] = None,
    extra: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """Write every PNG plus the JSON sidecar; returns the sidecar payload.

    ``extra`` keys are merged into the sidecar as-is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "tumor_png": f"{stem}_tumor.png",
        "nontumor_png": f"{stem}_nontumor.png",
        "coverage_png": f"{stem}_coverage.png",
        "overlay_png": f"{stem}_overlay.png",
    }
    (out / files["tumor_png"]).write_bytes(probability_png16(view.tumor))
    (out / files["nontumor_png"]).write_bytes(probability_png16(view.nontumor))
    (out / files["coverage_png"]).write_bytes(
        _encode_png(np.where(heatmap.covered, 255, 0).astype(np.uint8))
    )
    (out / files["overlay_png"]).write_bytes(render_overlay(image, view, alpha, base))
    if mode == "rgb":
        files["rgb_png"] = f"{stem}_rgb.png"
        (out / files["rgb_png"]).write_bytes(rgb_heatmap_png(heatmap))

    sidecar: dict[str, Any] = {
        "tumor_class": view.tumor_class.value,
        "nontumor_class": view.nontumor_class.value,
        "stride": heatmap.stride,
        "patch_side": heatmap.patch_side,
        "coverage": heatmap.coverage_stats(),
        "slide_distribution": [round(float(v), 6) for v in heatmap.slide_distribution()],
        "alpha": alpha,
        "mode": mode,
        "base": base,
        "files": files,
    }
    if truth_mask is not None:
        sidecar["iou"] = mask_iou(view.tumor_mask(), truth_mask)
    sidecar.update(extra or {})
    write_json_report(f"{stem}_segment.json", sidecar, out, stamp=False)
    log.info("segment.written", stem=stem, tumor_class=sidecar["tumor_class"],
             nontumor_class=sidecar["nontumor_class"], iou=sidecar.get("iou"))
    return sidecar
