"""Top-k accuracy, confusion matrices and mean class accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from src.errors import ContractError
from src.observability.logger import get_logger
from src.srh_io.labels import CLASS_NAMES, NUM_CLASSES

log = get_logger(__name__)


def true_label_rank(probs: np.ndarray, labels: Sequence[int] | np.ndarray) -> np.ndarray:
    """0-based rank of each true label; ties rank the lower class index first."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    p_true = p[np.arange(len(y)), y][:, None]
    cls = np.arange(p.shape[1])[None, :]
    ahead = (p > p_true) | ((p == p_true) & (cls < y[:, None]))
    return ahead.sum(axis=1)


def top_k_accuracy(
    probs: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    k: int,
) -> float:
    p = np.asarray(probs)
    if not 1 <= k <= p.shape[1]:
        raise ContractError(f"k must be in [1, {p.shape[1]}], got {k}")
    if len(p) == 0:
        return 0.0
    return float((true_label_rank(p, labels) < k).mean())


def confusion_matrix(
    true: Sequence[int] | np.ndarray,
    pred: Sequence[int] | np.ndarray,
    num_classes: int = NUM_CLASSES,
) -> np.ndarray:
    """K x K counts; rows are true classes, columns predictions."""
    t = np.asarray(true, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    flat = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def mean_class_accuracy(cm: np.ndarray, class_names: Sequence[str] = CLASS_NAMES) -> float:
    """Unweighted mean per-class recall; classes with no samples are dropped."""
    rows = cm.sum(axis=1)
    present = rows > 0
    if not present.any():
        raise ContractError("mean class accuracy of an empty confusion matrix")
    missing = [class_names[i] for i in np.flatnonzero(~present) if i < len(class_names)]
    if missing:
        log.warning("metrics.mca_classes_dropped", classes=missing)
    recall = np.diag(cm)[present] / rows[present]
    return float(recall.mean())


@dataclass(frozen=True)
class MetricSet:
    acc: float
    top2: float
    mca: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def metric_set(
    probs: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    top_k: int = 2,
) -> tuple[MetricSet, np.ndarray]:
    """Top-1, top-k and MCA of argmax predictions, plus the confusion matrix."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    cm = confusion_matrix(y, p.argmax(axis=1), p.shape[1])
    return MetricSet(
        acc=accuracy(cm),
        top2=top_k_accuracy(p, y, top_k),
        mca=mean_class_accuracy(cm),
    ), cm
