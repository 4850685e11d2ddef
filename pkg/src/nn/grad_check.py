"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from src.errors import ContractError
from src.nn.network import FeatureExtractor

# loss_fn(features, projections) -> (loss, d_features or None, d_projections or None)
LossFn = Callable[
    [np.ndarray, Optional[np.ndarray]],
    tuple[float, Optional[np.ndarray], Optional[np.ndarray]],
]

REL_FLOOR = 1.0e-8


def relative_error(analytic: np.ndarray | float, numeric: np.ndarray | float) -> np.ndarray:
    a = np.abs(np.asarray(analytic, dtype=np.float64))
    n = np.abs(np.asarray(numeric, dtype=np.float64))
    diff = np.abs(np.asarray(analytic, dtype=np.float64) - np.asarray(numeric, dtype=np.float64))
    return diff / np.maximum(np.maximum(a, n), REL_FLOOR)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    coordinates: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst_param(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=lambda k: self.per_param[k])


def _sample_coords(size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if size <= n:
        return np.arange(size)
    return np.sort(rng.choice(size, size=n, replace=False))


def numeric_gradient(
    f: Callable[[], float],
    arr: np.ndarray,
    flat_index: int,
    h: float = 1.0e-5,
) -> float:
    """Central difference of ``f`` w.r.t. one coordinate of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    plus = f()
    flat[flat_index] = orig - h
    minus = f()
    flat[flat_index] = orig
    return (plus - minus) / (2.0 * h)


def grad_check(
    model: FeatureExtractor,
    batch: np.ndarray,
    loss_fn: LossFn,
    tolerance: float = 1.0e-4,
    samples_per_param: int = 200,
    h: float = 1.0e-5,
    seed: int = 0,
    project: bool = True,
    analytic_override: Optional[dict[str, np.ndarray]] = None,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled coordinates.

    ``analytic_override`` replaces analytic gradients by name; tests use it to
    confirm a corrupted gradient is caught.
    """
    if model.dtype != np.float64:
        raise ContractError("grad_check requires a float64 model (use model.astype(np.float64))")
    x = batch.astype(np.float64)

    features, z = model.forward(x, project=project)
    _, d_feat, d_proj = loss_fn(features, z)
    if d_feat is None and d_proj is None:
        analytic = {k: np.zeros_like(v) for k, v in model.params.items()}
    else:
        analytic = model.backward(d_feat, d_proj)
    if analytic_override:
        analytic.update(analytic_override)
    model.clear_cache()

    def loss_value() -> float:
        f, p = model.forward(x, project=project, cache=False)
        return float(loss_fn(f, p)[0])

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    total = 0
    for name, arr in model.params.items():
        coords = _sample_coords(arr.size, samples_per_param, rng)
        ga = analytic[name].reshape(-1)[coords]
        gn = np.array([numeric_gradient(loss_value, arr, int(i), h) for i in coords])
        per_param[name] = float(relative_error(ga, gn).max()) if len(coords) else 0.0
        total += len(coords)

    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(
        max_rel_error=worst, tolerance=tolerance, per_param=per_param, coordinates=total
    )


def check_array_gradient(
    value_fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    samples: int = 200,
    h: float = 1.0e-5,
    seed: int = 0,
) -> float:
    """Max relative error of ``analytic`` against d value_fn / dx on sampled coordinates."""
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    coords = _sample_coords(x.size, samples, rng)
    gn = np.array([numeric_gradient(lambda: float(value_fn(x)), x, int(i), h) for i in coords])
    ga = np.asarray(analytic, dtype=np.float64).reshape(-1)[coords]
    return float(relative_error(ga, gn).max()) if len(coords) else 0.0
