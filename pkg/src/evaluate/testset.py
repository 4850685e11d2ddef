"""Held-out evaluation: patch, slide and patient level metric grid.

Slide level soft-aggregates a slide's patches; patient level soft-aggregates
the pooled patches of all the patient's slides. Patches the filter marked
nondiagnostic are left out of both (unless a slide or patient has nothing
else). Majority-vote accuracy is reported next to the soft numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from src.config import RunConfig
from src.errors import ContractError, LeakageError
from src.evaluate.aggregation import group_indices, majority_vote_index, soft_aggregate
from src.evaluate.inference import Predictor
from src.evaluate.metrics import MetricSet, metric_set
from src.observability.logger import get_logger
from src.observability.reports import write_json_report
from src.preprocess.dataset import PatchDataset, build_patch_dataset
from src.srh_io.labels import CLASS_NAMES
from src.srh_io.manifest import DatasetManifest, SplitSpec
from src.trainer.checkpoint import Checkpoint

log = get_logger(__name__)

LEVELS = ("patch", "slide", "patient")
TEXT_REPORT_NAME = "eval_table.txt"
JSON_REPORT_NAME = "eval_report.json"


@dataclass
class LevelResult:
    level: str
    metrics: MetricSet
    confusion: np.ndarray
    n: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "metrics": self.metrics.to_dict(),
            "confusion": self.confusion.tolist(),
            "class_names": list(CLASS_NAMES),
            "n": self.n,
        }


@dataclass
class EvalReport:
    levels: dict[str, LevelResult]
    majority_vote: dict[str, float] = field(default_factory=dict)
    centers: dict[str, dict[str, LevelResult]] = field(default_factory=dict)
    objective: str = ""

    def grid(self) -> dict[str, dict[str, float]]:
        return {lvl: self.levels[lvl].metrics.to_dict() for lvl in LEVELS if lvl in self.levels}

    def to_dict(self) -> dict[str, Any]:
        return {
            "objective": self.objective,
            "class_names": list(CLASS_NAMES),
            "levels": [self.levels[lvl].to_dict() for lvl in LEVELS if lvl in self.levels],
            "grid": self.grid(),
            "aggregation_comparison": {
                lvl: {"soft": self.levels[lvl].metrics.acc, "majority_vote": acc}
                for lvl, acc in self.majority_vote.items()
            },
            "centers": {
                center: [r.to_dict() for r in by_level.values()]
                for center, by_level in self.centers.items()
            },
        }

    def to_text(self) -> str:
        return format_table({self.objective or "model": self})


def check_leakage(
    split: SplitSpec,
    ckpt: Optional[Checkpoint] = None,
    evaluated: Optional[Iterable[str]] = None,
) -> None:
    """Hard failure when any test patient was seen in training.

    ``evaluated`` are the patient ids actually scored; they must not be
    training patients of the split or of the checkpoint.
    """
    seen = set(split.train_patients)
    if ckpt is not None:
        seen |= set(ckpt.train_patients)
    overlap = set(split.overlap) | (seen & set(split.test_patients))
    if evaluated is not None:
        overlap |= seen & {str(p) for p in evaluated}
    if overlap:
        shown = sorted(overlap)
        raise LeakageError(
            f"{len(shown)} test patients also appear in training: {shown[:10]}"
        )


def _aggregate(
    probs: np.ndarray,
    keys: np.ndarray,
    truth: np.ndarray,
    diagnostic: Optional[np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(soft dists, majority-vote indices, true labels) per group, groups sorted."""
    dists, votes, labels = [], [], []
    for _, idx in group_indices(keys).items():
        use = idx
        if diagnostic is not None:
            kept = idx[diagnostic[idx]]
            if len(kept):
                use = kept
        dists.append(soft_aggregate(probs[use]))
        votes.append(majority_vote_index(probs[use]))
        labels.append(int(truth[idx[0]]))
    return np.array(dists), np.array(votes), np.array(labels)


def _level_results(
    probs: np.ndarray,
    ds: PatchDataset,
    top_k: int,
    exclude_nondiagnostic: bool,
) -> tuple[dict[str, LevelResult], dict[str, float]]:
    diagnostic = ds.diagnostic if exclude_nondiagnostic else None
    results: dict[str, LevelResult] = {}
    ms, cm = metric_set(probs, ds.labels, top_k)
    results["patch"] = LevelResult("patch", ms, cm, len(ds))

    votes_acc: dict[str, float] = {}
    for level, keys in (("slide", ds.slide_ids), ("patient", ds.patient_ids)):
        dists, votes, truth = _aggregate(probs, keys, ds.slide_labels, diagnostic)
        ms, cm = metric_set(dists, truth, top_k)
        results[level] = LevelResult(level, ms, cm, len(truth))
        votes_acc[level] = float((votes == truth).mean())
    return results, votes_acc


def evaluate_predictions(
    probs: np.ndarray,
    ds: PatchDataset,
    top_k: int = 2,
    exclude_nondiagnostic: bool = True,
    objective: str = "",
) -> EvalReport:
    """Metric grid for precomputed patch distributions aligned with ``ds`` rows."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate an empty test set")
    if probs.shape[0] != len(ds):
        raise ContractError(f"{probs.shape[0]} predictions for {len(ds)} patches")
    levels, votes = _level_results(probs, ds, top_k, exclude_nondiagnostic)

    centers: dict[str, dict[str, LevelResult]] = {}
    for center, idx in group_indices(ds.centers).items():
        if not center:
            continue
        centers[center], _ = _level_results(probs[idx], ds.subset(idx), top_k,
                                            exclude_nondiagnostic)
    return EvalReport(levels=levels, majority_vote=votes, centers=centers, objective=objective)


def evaluate_testset(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    split: SplitSpec,
    cfg: RunConfig,
    threads: int = 1,
    dataset: Optional[PatchDataset] = None,
) -> EvalReport:
    """Evaluate ``ckpt`` on the split's test patients (leakage-checked first)."""
    check_leakage(split, ckpt)
    if dataset is None:
        entries = manifest.for_patients(split.test_patients)
        dataset = build_patch_dataset(manifest, entries, cfg.preprocess, threads)
    check_leakage(split, ckpt, np.unique(dataset.patient_ids).tolist())
    probs = Predictor(ckpt).predict(dataset.pixels, threads)
    report = evaluate_predictions(
        probs, dataset, cfg.eval.top_k, cfg.eval.exclude_nondiagnostic, ckpt.objective
    )
    for level, cell in report.grid().items():
        log.info("eval.level", level=level, objective=ckpt.objective, **cell)
    return report


_HEADER_LEVELS = ("Patch", "Slide", "Patient")


def format_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text table: one row per model, Top-1 / Top-2 / MCA per level."""
    name_w = max([len("Model")] + [len(k) for k in reports])
    cell = "{:>7}"
    group = " ".join(cell.format(h) for h in ("Top-1", "Top-2", "MCA"))
    top = " " * name_w + " | " + " | ".join(f"{h:^{len(group)}}" for h in _HEADER_LEVELS)
    sub = f"{'Model':<{name_w}}" + " | " + " | ".join(group for _ in _HEADER_LEVELS)
    lines = [top, sub, "-" * len(sub)]
    for name, rep in reports.items():
        cells = []
        for lvl in LEVELS:
            m = rep.levels[lvl].metrics
            cells.append(" ".join(cell.format(f"{v:.1%}") for v in (m.acc, m.top2, m.mca)))
        lines.append(f"{name:<{name_w}}" + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def write_eval_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    json_path = write_json_report(JSON_REPORT_NAME, report.to_dict(), out, include_metrics=True)
    text_path = out / TEXT_REPORT_NAME
    text_path.write_text(report.to_text())
    return json_path, text_path
