"""Heuristic 3-way patch filter used for automated patch annotation.

Decision from the B channel (ch2930 / 65535) of the unstandardized patch:
  variance < T_var        -> nondiagnostic
  else mean > T_mean      -> tumor_candidate
  else                    -> normal_candidate

Thresholds are calibrated against the synthetic generator by
``scripts/calibrate_filter.py``; the values live in PreprocessConfig.
"""

from __future__ import annotations

from enum import Enum
from typing import Union

import numpy as np

from src.preprocess.tiling import Patch

DEFAULT_T_VAR = 1.0e-4
DEFAULT_T_MEAN = 0.41

_B = 2


class FilterDecision(str, Enum):
    TUMOR_CANDIDATE = "tumor_candidate"
    NORMAL_CANDIDATE = "normal_candidate"
    NONDIAGNOSTIC = "nondiagnostic"

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> FilterDecision:
        return _DECISIONS[int(code)]


_DECISIONS = tuple(FilterDecision)
_CODES = {d: i for i, d in enumerate(_DECISIONS)}


def b_channel_stats(pixels: np.ndarray) -> tuple[float, float]:
    """(mean, variance) of the B channel of a (3, s, s) patch, in float64."""
    b = pixels[_B].astype(np.float64)
    return float(b.mean()), float(b.var())


def filter_patch(
    p: Union[Patch, np.ndarray],
    t_var: float = DEFAULT_T_VAR,
    t_mean: float = DEFAULT_T_MEAN,
) -> FilterDecision:
    pixels = p.pixels if isinstance(p, Patch) else p
    mean, var = b_channel_stats(pixels)
    if var < t_var:
        return FilterDecision.NONDIAGNOSTIC
    if mean > t_mean:
        return FilterDecision.TUMOR_CANDIDATE
    return FilterDecision.NORMAL_CANDIDATE
