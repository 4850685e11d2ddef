"""Feature-extractor training loop (SGD with momentum).

Objectives:
  ce      extractor + linear head trained jointly on augmented patches
  simclr  two augmented views per patch, sibling view is the positive
  supcon  two augmented views per patch, every same-class view is a positive

Batch preparation (sampling, augmentation, standardization) is seeded per
step up front, so prefetching it on a worker thread leaves the trajectory
unchanged. The parameter update is applied on the calling thread only.
"""

from __future__ import annotations

import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import numpy as np

from src.config import RunConfig
from src.errors import ContractError
from src.nn.network import FeatureExtractor
from src.objectives.contrastive import simclr_loss, supcon_loss
from src.objectives.cross_entropy import softmax_cross_entropy
from src.observability.logger import get_logger
from src.observability.metrics import metrics
from src.parallel import chunked
from src.preprocess.augment import AugmentationSpec, augment_batch, augment_batch_pair
from src.preprocess.dataset import PatchDataset
from src.preprocess.normalization import ChannelStats
from src.trainer.checkpoint import Checkpoint
from src.trainer.optimizers import SGD
from src.trainer.probe import LinearProbe
from src.trainer.sampler import class_balanced_batches, shuffled_batches

log = get_logger(__name__)

_HEAD_PREFIX = "head."


@dataclass
class _Batch:
    views: np.ndarray
    labels: np.ndarray


def _plan_epoch(dataset: PatchDataset, objective: str, batch_size: int,
                class_balanced: bool, rng: np.random.Generator) -> list[np.ndarray]:
    if objective == "supcon" and class_balanced:
        return class_balanced_batches(dataset.labels, batch_size, rng)
    # a lone trailing sample cannot form a contrastive pair
    min_size = 1 if objective == "ce" else 2
    return shuffled_batches(len(dataset), batch_size, rng, min_size=min_size)


def _prepare(
    dataset: PatchDataset,
    idx: np.ndarray,
    seed: int,
    objective: str,
    spec: AugmentationSpec,
    stats: ChannelStats,
) -> _Batch:
    pixels = dataset.pixels[idx]
    labels = dataset.labels[idx]
    if objective == "ce":
        return _Batch(stats.apply(augment_batch(pixels, seed, spec)), labels)
    first, second = augment_batch_pair(pixels, seed, spec)
    views = stats.apply(np.concatenate([first, second], axis=0))
    return _Batch(views, np.concatenate([labels, labels]))


def _prefetched(
    jobs: list[tuple[np.ndarray, int]],
    prepare: Any,
    threads: int,
) -> Iterator[_Batch]:
    """Yield prepared batches in order, preparing the next one in the background."""
    if threads <= 1:
        for idx, seed in jobs:
            yield prepare(idx, seed)
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending: Optional[Future[_Batch]] = None
        for i, (idx, seed) in enumerate(jobs):
            current = pending.result() if pending is not None else prepare(idx, seed)
            pending = pool.submit(prepare, *jobs[i + 1]) if i + 1 < len(jobs) else None
            yield current


def clip_gradients(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(
        float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()
    )))
    if max_norm is not None and norm > max_norm > 0:
        scale = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


class _Trainer:
    def __init__(self, model: FeatureExtractor, head: Optional[LinearProbe],
                 objective: str, tau: float, opt: SGD, clip: Optional[float]) -> None:
        self.model = model
        self.head = head
        self.objective = objective
        self.tau = tau
        self.opt = opt
        self.clip = clip

    def params(self) -> dict[str, np.ndarray]:
        p = dict(self.model.params)
        if self.head is not None:
            p.update({_HEAD_PREFIX + k: v for k, v in self.head.params.items()})
        return p

    def loss_and_grads(self, batch: _Batch) -> tuple[float, dict[str, np.ndarray]]:
        if self.objective == "ce":
            assert self.head is not None
            features, _ = self.model.forward(batch.views, project=False)
            loss, d_logits = softmax_cross_entropy(self.head.logits(features), batch.labels)
            d_features, head_grads = self.head.backward(d_logits)
            grads = self.model.backward(d_features=d_features)
            grads.update({_HEAD_PREFIX + k: g for k, g in head_grads.items()})
            return loss, grads
        _, z = self.model.forward(batch.views)
        if self.objective == "simclr":
            loss, dz = simclr_loss(z, self.tau)  # type: ignore[arg-type]
        else:
            loss, dz = supcon_loss(z, batch.labels, self.tau)  # type: ignore[arg-type]
        return loss, self.model.backward(d_projections=dz)

    def step(self, batch: _Batch) -> tuple[float, float]:
        loss, grads = self.loss_and_grads(batch)
        norm = clip_gradients(grads, self.clip)
        updated = self.opt.step(self.params(), grads)
        head_state = {}
        for k, v in updated.items():
            if k.startswith(_HEAD_PREFIX):
                head_state[k[len(_HEAD_PREFIX):]] = v
            else:
                self.model.set_param(k, v)
        if self.head is not None:
            self.head.load_state_dict(head_state)
        self.model.clear_cache()
        return loss, norm


def fit_channel_stats(dataset: PatchDataset, chunk: int = 512) -> ChannelStats:
    return ChannelStats.fit(dataset.pixels[sl] for sl in chunked(len(dataset), chunk))


def train_extractor(
    dataset: PatchDataset,
    cfg: RunConfig,
    threads: int = 1,
) -> Checkpoint:
    """Train the extractor with ``cfg.train.objective``; returns the final checkpoint."""
    tc = cfg.train
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if tc.objective in ("ce", "supcon") and len(dataset.classes) < 2:
        raise ContractError(f"{tc.objective} needs at least 2 classes, got {dataset.classes}")

    stats = fit_channel_stats(dataset)
    model = FeatureExtractor(cfg.model, dataset.side)
    head = LinearProbe(cfg.model.feature_dim) if tc.objective == "ce" else None
    trainer = _Trainer(model, head, tc.objective, tc.temperature,
                       SGD(tc.lr, tc.momentum), tc.grad_clip_norm)
    spec = AugmentationSpec.from_config(cfg.preprocess.augmentation)
    batch_size = tc.effective_batch_size
    rng = np.random.default_rng(tc.seed)

    def prepare(idx: np.ndarray, seed: int) -> _Batch:
        return _prepare(dataset, idx, seed, tc.objective, spec, stats)

    history: list[dict[str, Any]] = []
    step_losses: list[float] = []
    log.info("trainer.start", objective=tc.objective, patches=len(dataset),
             classes=len(dataset.classes), batch_size=batch_size, epochs=tc.epochs,
             parameters=model.num_parameters)
    for epoch in range(tc.epochs):
        batches = _plan_epoch(dataset, tc.objective, batch_size, tc.class_balanced, rng)
        seeds = rng.integers(0, 2**31 - 1, size=len(batches))
        jobs = [(b, int(s)) for b, s in zip(batches, seeds)]
        t0 = time.monotonic()
        epoch_losses = []
        for batch in _prefetched(jobs, prepare, threads):
            with metrics.timer("trainer.step_seconds"):
                loss, norm = trainer.step(batch)
            metrics.histogram("trainer.step_loss", loss)
            metrics.histogram("trainer.grad_norm", norm)
            epoch_losses.append(loss)
        step_losses.extend(epoch_losses)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        metrics.gauge("trainer.epoch_loss", mean_loss)
        history.append({"phase": "extractor", "epoch": epoch, "loss": mean_loss,
                        "steps": len(epoch_losses)})
        log.info("trainer.epoch", epoch=epoch, loss=mean_loss, steps=len(epoch_losses),
                 seconds=time.monotonic() - t0)

    history.append({"phase": "extractor_steps", "losses": [float(v) for v in step_losses]})
    ckpt = Checkpoint.from_model(
        model,
        stats,
        probe=head.state_dict() if head is not None else None,
        objective=tc.objective,
        config=cfg.model_dump(mode="json"),
        history=history,
        train_patients=sorted({str(p) for p in dataset.patient_ids}),
        train_slides=sorted({str(s) for s in dataset.slide_ids}),
    )
    log.info("trainer.done", objective=tc.objective, steps=len(step_losses),
             final_loss=step_losses[-1] if step_losses else None)
    return ckpt


def step_losses(ckpt: Checkpoint) -> list[float]:
    for entry in ckpt.history:
        if entry.get("phase") == "extractor_steps":
            return [float(v) for v in entry["losses"]]
    return []
