"""SRH1 slide files and PGM ground-truth masks.

SRH1 layout (little-endian):
  magic  b"SRH1"
  u32    height
  u32    width
  u16[H*W] ch2845, row-major
  u16[H*W] ch2930, row-major
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from src.errors import SlideFormatError, SlideSizeError

MAGIC = b"SRH1"
_HEADER = struct.Struct("<4sII")
_PIXEL_DTYPE = np.dtype("<u2")


@dataclass(frozen=True, eq=False)
class RawSrhImage:
    """Two co-registered 16-bit Raman channels of one slide."""
    height: int
    width: int
    ch2845: np.ndarray  # (H, W) uint16, lipid-rich signal
    ch2930: np.ndarray  # (H, W) uint16, protein / nucleic-acid signal

    def __post_init__(self) -> None:
        for name in ("ch2845", "ch2930"):
            arr = getattr(self, name)
            if arr.dtype != np.uint16:
                raise SlideFormatError(f"{name} must be uint16, got {arr.dtype}")
            if arr.shape != (self.height, self.width):
                raise SlideSizeError(
                    f"{name} has shape {arr.shape}, expected {(self.height, self.width)}"
                )

    @classmethod
    def from_channels(cls, ch2845: np.ndarray, ch2930: np.ndarray) -> RawSrhImage:
        if ch2845.shape != ch2930.shape or ch2845.ndim != 2:
            raise SlideSizeError(
                f"channel shapes differ or are not 2-D: {ch2845.shape} vs {ch2930.shape}"
            )
        h, w = ch2845.shape
        return cls(h, w, np.ascontiguousarray(ch2845, dtype=np.uint16),
                   np.ascontiguousarray(ch2930, dtype=np.uint16))

    def equals(self, other: RawSrhImage) -> bool:
        """Bit-exact comparison."""
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.ch2845, other.ch2845)
            and np.array_equal(self.ch2930, other.ch2930)
        )

    def crop(self, top: int, left: int, height: int, width: int) -> RawSrhImage:
        return RawSrhImage.from_channels(
            self.ch2845[top:top + height, left:left + width].copy(),
            self.ch2930[top:top + height, left:left + width].copy(),
        )


def encode_slide(img: RawSrhImage) -> bytes:
    header = _HEADER.pack(MAGIC, img.height, img.width)
    return (
        header
        + img.ch2845.astype(_PIXEL_DTYPE, copy=False).tobytes(order="C")
        + img.ch2930.astype(_PIXEL_DTYPE, copy=False).tobytes(order="C")
    )


def decode_slide(data: bytes) -> RawSrhImage:
    if len(data) < _HEADER.size:
        raise SlideFormatError(f"header truncated: {len(data)} bytes")
    magic, height, width = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SlideFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    n = height * width
    expected = _HEADER.size + 2 * n * _PIXEL_DTYPE.itemsize
    if len(data) < expected:
        raise SlideSizeError(
            f"payload truncated: header declares {height}x{width}, "
            f"need {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise SlideFormatError(f"{len(data) - expected} trailing bytes after payload")
    pixels = np.frombuffer(data, dtype=_PIXEL_DTYPE, count=2 * n, offset=_HEADER.size)
    ch2845 = pixels[:n].reshape(height, width).astype(np.uint16)
    ch2930 = pixels[n:].reshape(height, width).astype(np.uint16)
    return RawSrhImage(height, width, ch2845, ch2930)


def write_slide(img: RawSrhImage, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_slide(img))
    return path


def read_slide(path: str | Path) -> RawSrhImage:
    """Read an SRH1 file; raises SlideFormatError / SlideSizeError."""
    return decode_slide(Path(path).read_bytes())


# ── Ground-truth masks (binary PGM, 0 = nontumor, 255 = tumor) ──────

def encode_mask_pgm(mask: np.ndarray) -> bytes:
    if mask.ndim != 2:
        raise SlideSizeError(f"mask must be 2-D, got shape {mask.shape}")
    img = Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PPM")
    return buf.getvalue()


def write_mask_pgm(mask: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_mask_pgm(mask))
    return path


def read_mask_pgm(path: str | Path) -> np.ndarray:
    """Boolean mask, True where tumor."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise SlideFormatError(f"mask {path} is mode {img.mode}, expected L")
        return np.asarray(img) > 127
