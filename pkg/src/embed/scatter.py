"""CSV export of 2-D embedding coordinates: header ``x,y,label``."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from src.errors import ShapeError

HEADER = ("x", "y", "label")


def export_scatter(coords: np.ndarray, labels: Sequence[str] | np.ndarray) -> str:
    """One row per point in input order; coordinates to 9 significant digits."""
    xy = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    labs = list(np.asarray(labels).tolist())
    if len(xy) != len(labs):
        raise ShapeError(f"{len(xy)} coordinates for {len(labs)} labels")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for (x, y), label in zip(xy, labs):
        writer.writerow([f"{x:.9g}", f"{y:.9g}", str(label)])
    return buf.getvalue()


def write_scatter(
    path: str | Path,
    coords: np.ndarray,
    labels: Sequence[str] | np.ndarray,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(export_scatter(coords, labels))
    return path


def parse_scatter(text: str) -> tuple[np.ndarray, list[str]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise ShapeError(f"scatter CSV must start with {','.join(HEADER)}")
    coords: list[tuple[float, float]] = []
    labels: list[str] = []
    for row in reader:
        coords.append((float(row[0]), float(row[1])))
        labels.append(row[2])
    return np.array(coords, dtype=np.float64).reshape(-1, 2), labels


def read_scatter(path: str | Path) -> tuple[np.ndarray, list[str]]:
    return parse_scatter(Path(path).read_text())
