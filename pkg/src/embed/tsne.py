"""Exact t-SNE (O(N^2)), deterministic under a fixed seed.

Affinities: per-point Gaussian bandwidth found by bisection so each
conditional distribution's entropy is log2(perplexity) bits, then
symmetrized P = (P_cond + P_cond^T) / 2N. Optimization: gradient descent
with momentum and per-coordinate gains, early exaggeration of P over the
first iterations.

Initial coordinates are drawn per point from a generator seeded by the
hash of the point's feature row and the run seed, so permuting the input
rows permutes the output rows the same way.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.metrics import silhouette_score

from src.config import TsneConfig
from src.errors import ContractError, DegeneracyError
from src.observability.logger import get_logger

log = get_logger(__name__)

ENTROPY_TOL = 1.0e-5
MIN_POINTS = 10
INIT_STD = 1.0e-4
_Q_FLOOR = 1.0e-12
_KL_EVERY = 50


@dataclass
class TsneResult:
    coords: np.ndarray            # (N, 2)
    betas: np.ndarray             # (N,) precision 1 / (2 sigma^2) per point
    entropy_error: float          # max |H_i - log2(perplexity)| in bits
    kl_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(1.0 / (2.0 * self.betas))

    @property
    def initial_kl(self) -> float:
        return self.kl_history[0][1]

    @property
    def final_kl(self) -> float:
        return self.kl_history[-1][1]


def _row_entropy_bits(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    p = np.exp(-d * beta)
    total = p.sum()
    h_nats = math.log(total) + beta * float(np.dot(d, p)) / total
    return h_nats / math.log(2.0), p / total


def conditional_probabilities(
    sq_dist: np.ndarray,
    perplexity: float,
    tol: float = ENTROPY_TOL,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(P_cond rows, betas, row entropies in bits) from squared distances."""
    n = sq_dist.shape[0]
    target = math.log2(perplexity)
    P = np.zeros((n, n), dtype=np.float64)
    betas = np.ones(n, dtype=np.float64)
    entropies = np.zeros(n, dtype=np.float64)
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        d = d - d.min()  # shift only rescales the row before normalization
        beta, lo, hi = 1.0, 0.0, math.inf
        h, p = _row_entropy_bits(d, beta)
        for _ in range(max_iter):
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if math.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy_bits(d, beta)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def joint_probabilities(p_cond: np.ndarray) -> np.ndarray:
    n = p_cond.shape[0]
    return (p_cond + p_cond.T) / (2.0 * n)


def _student_t(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + cdist(Y, Y, "sqeuclidean"))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), _Q_FLOOR)
    return num, Q


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    _, Q = _student_t(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def _point_seed(row: np.ndarray, seed: int) -> int:
    h = hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=8,
                        key=int(seed).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def initial_coordinates(X: np.ndarray, seed: int) -> np.ndarray:
    return np.stack([
        np.random.default_rng(_point_seed(row, seed)).normal(0.0, INIT_STD, size=2)
        for row in X
    ])


def validate_inputs(n: int, perplexity: float) -> None:
    if n < MIN_POINTS:
        raise ContractError(f"tsne needs at least {MIN_POINTS} points, got {n}")
    if not 1.0 < perplexity < (n - 1) / 3.0:
        raise ContractError(
            f"perplexity must be in (1, {(n - 1) / 3.0:.2f}) for {n} points, got {perplexity}"
        )


def tsne(features: np.ndarray, cfg: TsneConfig) -> TsneResult:
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    validate_inputs(n, cfg.perplexity)
    sq = cdist(X, X, "sqeuclidean")
    if not np.any(sq > 0):
        raise DegeneracyError("all input points are identical")

    p_cond, betas, entropies = conditional_probabilities(sq, cfg.perplexity)
    entropy_error = float(np.max(np.abs(entropies - math.log2(cfg.perplexity))))
    P = joint_probabilities(p_cond)

    Y = initial_coordinates(X, cfg.seed)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = [(0, kl_divergence(P, Y))]
    P_run = P * cfg.early_exaggeration

    for it in range(cfg.iterations):
        if it == cfg.exaggeration_iters:
            P_run = P
        num, Q = _student_t(Y)
        W = (P_run - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)

        momentum = cfg.initial_momentum if it < cfg.momentum_switch_iter else cfg.final_momentum
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.maximum(np.where(same_sign, gains * 0.8, gains + 0.2), 0.01)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)

        if (it + 1) % _KL_EVERY == 0 or it + 1 == cfg.iterations:
            kl = kl_divergence(P, Y)
            history.append((it + 1, kl))
            log.debug("tsne.iteration", iteration=it + 1, kl=kl)

    log.info("tsne.done", points=n, iterations=cfg.iterations,
             initial_kl=history[0][1], final_kl=history[-1][1], entropy_error=entropy_error)
    return TsneResult(coords=Y, betas=betas, entropy_error=entropy_error, kl_history=history)


def silhouette(coords: np.ndarray, labels: np.ndarray) -> float:
    """Silhouette of the 2-D layout under the given labels; 0.0 for a single class."""
    if len(np.unique(labels)) < 2:
        return 0.0
    return float(silhouette_score(coords, labels))
