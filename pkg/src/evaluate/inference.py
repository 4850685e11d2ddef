"""Patch inference: checkpoint extractor + probe -> 8-class ProbDists."""

from __future__ import annotations

import numpy as np

from src.errors import StateError
from src.observability.metrics import metrics
from src.parallel import chunked, map_workers
from src.trainer.checkpoint import Checkpoint
from src.trainer.probe import LinearProbe


class Predictor:
    """Read-only view of a checkpoint; ``predict`` is safe across threads."""

    def __init__(self, ckpt: Checkpoint, batch_size: int = 256) -> None:
        if ckpt.probe is None:
            raise StateError(
                "checkpoint has no linear probe; run `srh probe` first "
                f"(objective {ckpt.objective or 'unknown'})"
            )
        self.ckpt = ckpt
        self.model = ckpt.build_extractor()
        self.probe = LinearProbe.from_state(ckpt.probe)
        self.stats = ckpt.stats
        self.batch_size = batch_size

    @property
    def input_side(self) -> int:
        return self.ckpt.input_side

    def _predict_chunk(self, pixels: np.ndarray) -> np.ndarray:
        features = self.model.embed(self.stats.apply(pixels), batch_size=self.batch_size)
        return self.probe.predict_proba(features)

    def predict(self, pixels: np.ndarray, threads: int = 1) -> np.ndarray:
        """(N, 8) float64 distributions for unstandardized (N, 3, s, s) pixels."""
        chunks = chunked(len(pixels), self.batch_size)
        outs = map_workers(lambda sl: self._predict_chunk(pixels[sl]), chunks, threads)
        metrics.incr("inference.patches", float(len(pixels)))
        if not outs:
            return np.zeros((0, self.probe.layer.out_features), dtype=np.float64)
        return np.concatenate(outs, axis=0)


def predict_proba(ckpt: Checkpoint, pixels: np.ndarray, threads: int = 1) -> np.ndarray:
    return Predictor(ckpt).predict(pixels, threads)
