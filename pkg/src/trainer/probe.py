"""Linear classification layer on frozen extractor features (Adam)."""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from src.config import ProbeConfig
from src.errors import ContractError, ShapeError
from src.nn.functional import softmax
from src.nn.layers import Dense
from src.objectives.cross_entropy import softmax_cross_entropy
from src.observability.logger import get_logger
from src.observability.metrics import metrics
from src.parallel import chunked, map_workers
from src.preprocess.dataset import PatchDataset
from src.srh_io.labels import NUM_CLASSES
from src.trainer.checkpoint import Checkpoint
from src.trainer.optimizers import Adam
from src.trainer.sampler import shuffled_batches

log = get_logger(__name__)


class LinearProbe:
    """``logits = features @ W + b``; W is (D, 8)."""

    def __init__(
        self,
        in_features: int,
        num_classes: int = NUM_CLASSES,
        dtype: Any = np.float32,
    ) -> None:
        self.layer = Dense(in_features, num_classes, rng=None, name="probe", dtype=dtype)

    @property
    def in_features(self) -> int:
        return self.layer.in_features

    @property
    def params(self) -> dict[str, np.ndarray]:
        return dict(self.layer.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.layer.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.layer.params[k].shape != np.shape(v):
                raise ShapeError(
                    f"probe.{k}: shape {np.shape(v)} != {self.layer.params[k].shape}"
                )
            self.layer.params[k] = np.asarray(v, dtype=self.layer.params[k].dtype)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> LinearProbe:
        d, k = state["W"].shape
        probe = cls(d, k, dtype=state["W"].dtype)
        probe.load_state_dict(state)
        return probe

    def _check(self, features: np.ndarray) -> None:
        if features.ndim != 2 or features.shape[1] != self.in_features:
            raise ShapeError(
                f"probe expects (N, {self.in_features}) features, got {features.shape}"
            )

    def logits(self, features: np.ndarray, cache: bool = True) -> np.ndarray:
        self._check(features)
        return self.layer.forward(features.astype(self.layer.params["W"].dtype), cache=cache)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features, cache=False).astype(np.float64), axis=1)

    def backward(self, d_logits: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """(d features, parameter gradients)."""
        dx = self.layer.backward(d_logits.astype(self.layer.params["W"].dtype))
        return dx, {k: g.copy() for k, g in self.layer.grads.items()}


def _feature_scaling(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    sigma = features.std(axis=0)
    sigma = np.where(sigma > 1.0e-6, sigma, 1.0)
    return mu, sigma


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeConfig,
    num_classes: int = NUM_CLASSES,
) -> tuple[LinearProbe, list[dict[str, Any]]]:
    """Adam on softmax cross-entropy over frozen features.

    Features are z-scored with their own statistics while fitting, and the
    scaling is folded into W and b, so the result is a plain linear layer on
    raw features.
    """
    if len(features) == 0:
        raise ContractError("cannot fit a probe on zero samples")
    if len(features) != len(labels):
        raise ShapeError(f"{len(features)} feature rows vs {len(labels)} labels")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    mu, sigma = _feature_scaling(x)
    xs = (x - mu) / sigma

    probe = LinearProbe(x.shape[1], num_classes, dtype=np.float64)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict[str, Any]] = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in shuffled_batches(len(xs), cfg.batch_size, rng, min_size=1):
            logits = probe.logits(xs[idx])
            loss, d_logits = softmax_cross_entropy(logits, y[idx])
            _, grads = probe.backward(d_logits)
            probe.load_state_dict(opt.step(probe.params, grads))
            losses.append(loss)
            metrics.histogram("probe.step_loss", loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        history.append({"phase": "probe", "epoch": epoch, "loss": mean_loss})
        log.info("probe.epoch", epoch=epoch, loss=mean_loss)

    W = probe.params["W"] / sigma[:, None]
    b = probe.params["b"] - (mu / sigma) @ probe.params["W"]
    folded = LinearProbe(x.shape[1], num_classes, dtype=np.float32)
    folded.load_state_dict({"W": W.astype(np.float32), "b": b.astype(np.float32)})
    return folded, history


def checkpoint_features(
    ckpt: Checkpoint,
    pixels: np.ndarray,
    threads: int = 1,
    use_projection: bool = False,
    batch_size: int = 256,
) -> np.ndarray:
    """Frozen-extractor features of unstandardized pixels, in input order."""
    model = ckpt.build_extractor()
    chunks = chunked(len(pixels), batch_size)

    def _run(sl: slice) -> np.ndarray:
        return model.embed(ckpt.stats.apply(pixels[sl]), use_projection=use_projection)

    outs = map_workers(_run, chunks, threads)
    if not outs:
        dim = ckpt.model_config["projection_dim" if use_projection else "feature_dim"]
        return np.zeros((0, dim), dtype=np.float32)
    return np.concatenate(outs, axis=0)


def train_linear_probe(
    ckpt: Checkpoint,
    dataset: PatchDataset,
    cfg: ProbeConfig,
    threads: int = 1,
) -> Checkpoint:
    """Fit the probe on frozen features; extractor parameters are left untouched."""
    if len(dataset) == 0:
        raise ContractError("cannot train a probe on an empty dataset")
    if dataset.side != ckpt.input_side:
        raise ShapeError(
            f"dataset patches are {dataset.side}px, checkpoint expects {ckpt.input_side}px"
        )
    features = checkpoint_features(ckpt, dataset.pixels, threads)
    if ckpt.probe is not None and ckpt.probe["W"].shape[0] != features.shape[1]:
        raise ShapeError(
            f"existing probe takes {ckpt.probe['W'].shape[0]} features, "
            f"extractor emits {features.shape[1]}"
        )
    probe, history = fit_probe(features, dataset.labels, cfg)
    acc = float((probe.predict_proba(features).argmax(axis=1) == dataset.labels).mean())
    log.info("probe.trained", samples=len(dataset), train_accuracy=acc)
    history.append({"phase": "probe_summary", "train_accuracy": acc})
    return ckpt.with_probe(probe.state_dict(), history)
