"""Per-slide binary patch cache.

Layout (little-endian):
  u32 patch count
  per patch: u32 row offset, u32 col offset, u8 class index,
             float32[3 * side * side] pixels, channel-major

The side is not stored; readers pass the side the cache was written with.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from src.errors import SlideFormatError, SlideSizeError
from src.preprocess.tiling import Patch
from src.srh_io.labels import ClassLabel

_COUNT = struct.Struct("<I")
_RECORD = struct.Struct("<IIB")
_PIXEL_DTYPE = np.dtype("<f4")
_NO_LABEL = 255


def encode_patches(patches: list[Patch]) -> bytes:
    parts = [_COUNT.pack(len(patches))]
    side: Optional[int] = None
    for p in patches:
        if side is None:
            side = p.side
        elif p.side != side:
            raise SlideSizeError(f"mixed patch sides in one cache: {side} and {p.side}")
        code = _NO_LABEL if p.label is None else p.label.class_index
        parts.append(_RECORD.pack(p.offset[0], p.offset[1], code))
        parts.append(np.ascontiguousarray(p.pixels, dtype=_PIXEL_DTYPE).tobytes())
    return b"".join(parts)


def decode_patches(
    data: bytes,
    side: int,
    slide_id: str = "",
    patient_id: str = "",
) -> list[Patch]:
    if len(data) < _COUNT.size:
        raise SlideFormatError("patch cache shorter than its count header")
    (count,) = _COUNT.unpack_from(data, 0)
    n_pixels = 3 * side * side
    record = _RECORD.size + n_pixels * _PIXEL_DTYPE.itemsize
    expected = _COUNT.size + count * record
    if len(data) != expected:
        raise SlideSizeError(
            f"patch cache holds {len(data)} bytes, expected {expected} for "
            f"{count} patches of side {side}"
        )
    patches: list[Patch] = []
    pos = _COUNT.size
    for _ in range(count):
        row, col, code = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        pixels = np.frombuffer(data, dtype=_PIXEL_DTYPE, count=n_pixels, offset=pos)
        pos += n_pixels * _PIXEL_DTYPE.itemsize
        patches.append(Patch(
            pixels=pixels.reshape(3, side, side).astype(np.float32),
            slide_id=slide_id,
            patient_id=patient_id,
            offset=(row, col),
            label=None if code == _NO_LABEL else ClassLabel.from_index(code),
        ))
    return patches


def write_patch_cache(patches: list[Patch], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_patches(patches))
    return path


def read_patch_cache(
    path: str | Path,
    side: int,
    slide_id: str = "",
    patient_id: str = "",
) -> list[Patch]:
    return decode_patches(Path(path).read_bytes(), side, slide_id, patient_id)
