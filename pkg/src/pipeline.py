"""Run orchestration: one function per CLI command, plus the full ``all`` run.

Run directory layout (``cfg.out_dir``):
  cohort/manifest.json, cohort/split.json, cohort/fixtures.json, cohort/slides/
  checkpoints/<objective>.ckpt
  eval/<objective>/eval_report.json, eval_table.txt
  segment/<slide stem>_*.png, <slide stem>_segment.json
  embed/<objective>/scatter.csv, embed_report.json
  comparison.txt, comparison.json          (``all`` only)

Every stage writes ``resolved_config.json`` into its output directory and
re-reads what it wrote before returning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.config import PreprocessConfig, RunConfig
from src.embed.extract import extract_embeddings, stratified_sample
from src.embed.scatter import read_scatter, write_scatter
from src.embed.tsne import TsneResult, silhouette, tsne
from src.errors import CheckpointError, ContractError
from src.evaluate.inference import Predictor
from src.evaluate.testset import (
    JSON_REPORT_NAME,
    EvalReport,
    evaluate_testset,
    format_table,
    write_eval_report,
)
from src.observability.logger import get_logger
from src.observability.reports import read_json_report, write_json_report
from src.preprocess.channels import to_three_channel
from src.preprocess.dataset import PatchDataset, build_patch_dataset
from src.segment.heatmap import probability_heatmap
from src.segment.overlay import write_segmentation
from src.segment.views import island_recall, two_channel_view
from src.srh_io.cohort import FIXTURES_NAME, MANIFEST_NAME, generate_cohort
from src.srh_io.labels import CLASS_NAMES
from src.srh_io.manifest import DatasetManifest, SplitSpec, split_by_patient
from src.srh_io.slide_format import read_mask_pgm, read_slide
from src.trainer.checkpoint import Checkpoint
from src.trainer.extractor import train_extractor
from src.trainer.probe import train_linear_probe

log = get_logger(__name__)

SPLIT_NAME = "split.json"
SCATTER_NAME = "scatter.csv"
EMBED_REPORT_NAME = "embed_report.json"
COMPARISON_TEXT_NAME = "comparison.txt"
COMPARISON_JSON_NAME = "comparison.json"

OBJECTIVE_TITLES = {
    "ce": "CE",
    "simclr": "SSL + Linear",
    "supcon": "SupCon + Linear",
}


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def of(cls, cfg: RunConfig) -> RunPaths:
        return cls(Path(cfg.out_dir))

    @property
    def cohort(self) -> Path:
        return self.root / "cohort"

    @property
    def manifest(self) -> Path:
        return self.cohort / MANIFEST_NAME

    @property
    def split(self) -> Path:
        return self.cohort / SPLIT_NAME

    @property
    def fixtures(self) -> Path:
        return self.cohort / FIXTURES_NAME

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def checkpoint(self, objective: str) -> Path:
        return self.checkpoints / f"{objective}.ckpt"

    def eval_dir(self, name: str) -> Path:
        return self.root / "eval" / name

    @property
    def segment_dir(self) -> Path:
        return self.root / "segment"

    def embed_dir(self, name: str) -> Path:
        return self.root / "embed" / name


def with_objective(cfg: RunConfig, objective: str) -> RunConfig:
    raw = cfg.model_dump()
    raw["train"]["objective"] = objective
    return RunConfig(**raw)


def checkpoint_preprocess(ckpt: Checkpoint, cfg: RunConfig) -> PreprocessConfig:
    """Tiling settings the checkpoint was trained with; falls back to ``cfg``."""
    saved = ckpt.config.get("preprocess")
    pre = PreprocessConfig(**saved) if saved else cfg.preprocess
    if pre.input_side != ckpt.input_side:
        raise CheckpointError(
            f"checkpoint input side {ckpt.input_side} does not match preprocess "
            f"input_side {pre.input_side}"
        )
    # cache location is a property of this run, not of the checkpoint
    return pre.model_copy(update={"cache_dir": cfg.preprocess.cache_dir})


def _for_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> RunConfig:
    return cfg.model_copy(update={"preprocess": checkpoint_preprocess(ckpt, cfg)})


# ── gen ─────────────────────────────────────────────────────────────

@dataclass
class GenResult:
    manifest: DatasetManifest
    split: SplitSpec
    fixtures: list[dict[str, Any]]


def run_gen(cfg: RunConfig, threads: int = 1) -> GenResult:
    paths = RunPaths.of(cfg)
    manifest = generate_cohort(
        cfg.cohort, paths.cohort, cfg.seed, cfg.preprocess.patch_side, threads
    )
    split = split_by_patient(manifest, cfg.cohort.test_fraction, cfg.seed)
    split.save(paths.split)
    cfg.write_resolved(paths.cohort)

    reloaded = DatasetManifest.load(paths.manifest)
    reloaded.validate_files()
    SplitSpec.load(paths.split)
    fixtures = json.loads(paths.fixtures.read_text())
    return GenResult(manifest=reloaded, split=split, fixtures=fixtures)


def load_cohort(cfg: RunConfig) -> tuple[DatasetManifest, SplitSpec]:
    paths = RunPaths.of(cfg)
    if not paths.manifest.exists():
        raise FileNotFoundError(f"no manifest at {paths.manifest}; run `srh gen` first")
    if not paths.split.exists():
        raise FileNotFoundError(f"no split at {paths.split}; run `srh gen` first")
    return DatasetManifest.load(paths.manifest), SplitSpec.load(paths.split)


def split_dataset(
    manifest: DatasetManifest,
    patients: frozenset[str],
    pre: PreprocessConfig,
    threads: int = 1,
) -> PatchDataset:
    return build_patch_dataset(manifest, manifest.for_patients(patients), pre, threads)


# ── train / probe ───────────────────────────────────────────────────

def _save_verified(ckpt: Checkpoint, path: Path) -> Path:
    ckpt.save(path)
    if Checkpoint.load(path).to_bytes() != ckpt.to_bytes():
        raise CheckpointError(f"checkpoint {path} did not round-trip")
    return path


def run_train(
    cfg: RunConfig,
    threads: int = 1,
    dataset: Optional[PatchDataset] = None,
) -> tuple[Checkpoint, Path]:
    """Train ``cfg.train.objective``; the ce checkpoint already carries its probe."""
    paths = RunPaths.of(cfg)
    if dataset is None:
        manifest, split = load_cohort(cfg)
        dataset = split_dataset(manifest, split.train_patients, cfg.preprocess, threads)
    ckpt = train_extractor(dataset, cfg, threads)
    path = _save_verified(ckpt, paths.checkpoint(cfg.train.objective))
    cfg.write_resolved(paths.checkpoints)
    log.info("pipeline.trained", objective=cfg.train.objective, path=str(path),
             has_probe=ckpt.has_probe)
    return ckpt, path


def run_probe(
    cfg: RunConfig,
    checkpoint_path: str | Path,
    threads: int = 1,
    dataset: Optional[PatchDataset] = None,
) -> tuple[Checkpoint, Path]:
    """Fit the linear probe on the training patients and rewrite the checkpoint."""
    path = Path(checkpoint_path)
    ckpt = Checkpoint.load(path)
    if dataset is None:
        manifest, split = load_cohort(cfg)
        dataset = split_dataset(
            manifest, split.train_patients, checkpoint_preprocess(ckpt, cfg), threads
        )
    probed = train_linear_probe(ckpt, dataset, cfg.probe, threads)
    _save_verified(probed, path)
    cfg.write_resolved(path.parent)
    return probed, path


# ── eval ────────────────────────────────────────────────────────────

@dataclass
class EvalResult:
    report: EvalReport
    json_path: Path
    text_path: Path


def run_eval(
    cfg: RunConfig,
    checkpoint_path: str | Path,
    threads: int = 1,
    dataset: Optional[PatchDataset] = None,
    name: Optional[str] = None,
) -> EvalResult:
    ckpt = Checkpoint.load(checkpoint_path)
    manifest, split = load_cohort(cfg)
    report = evaluate_testset(ckpt, manifest, split, _for_checkpoint(cfg, ckpt), threads, dataset)
    out = RunPaths.of(cfg).eval_dir(name or ckpt.objective or Path(checkpoint_path).stem)
    json_path, text_path = write_eval_report(report, out)
    cfg.write_resolved(out)

    written = read_json_report(json_path)
    if written.get("grid") != report.grid():
        raise ContractError(f"{JSON_REPORT_NAME} at {json_path} does not match the evaluation")
    return EvalResult(report=report, json_path=json_path, text_path=text_path)


# ── segment ─────────────────────────────────────────────────────────

def run_segment(
    cfg: RunConfig,
    checkpoint_path: str | Path,
    slide_path: str | Path,
    mask_path: Optional[str | Path] = None,
    threads: int = 1,
    kind: str = "",
) -> dict[str, Any]:
    """Heatmap PNGs and sidecar for one slide; IoU (and island recall) when a mask is given."""
    ckpt = Checkpoint.load(checkpoint_path)
    pre = checkpoint_preprocess(ckpt, cfg)
    sc = cfg.segment
    raw = read_slide(slide_path)
    heatmap = probability_heatmap(
        raw, Predictor(ckpt), sc.effective_stride(pre.patch_side), pre, threads
    )
    view = two_channel_view(heatmap)
    truth = read_mask_pgm(mask_path) if mask_path is not None else None
    extra: dict[str, Any] = {"slide": str(slide_path), "objective": ckpt.objective}
    if kind:
        extra["kind"] = kind
    if truth is not None and kind == "infiltration":
        extra["island_recall"] = island_recall(view, truth)

    out = RunPaths.of(cfg).segment_dir
    stem = Path(slide_path).stem
    sidecar = write_segmentation(
        out, stem, to_three_channel(raw), heatmap, view,
        alpha=sc.alpha, mode=sc.mode, base=sc.base, truth_mask=truth, extra=extra,
    )
    cfg.write_resolved(out)
    written = read_json_report(out / f"{stem}_segment.json")
    for png in written["files"].values():
        if not (out / png).is_file():
            raise ContractError(f"segmentation output {png} missing from {out}")
    return sidecar


def run_segment_fixtures(
    cfg: RunConfig,
    checkpoint_path: str | Path,
    threads: int = 1,
) -> list[dict[str, Any]]:
    """Segment every margin and infiltration fixture listed by ``gen``."""
    paths = RunPaths.of(cfg)
    if not paths.fixtures.exists():
        raise FileNotFoundError(f"no fixtures at {paths.fixtures}; run `srh gen` first")
    records = json.loads(paths.fixtures.read_text())
    return [
        run_segment(cfg, checkpoint_path, paths.cohort / r["slide"], paths.cohort / r["mask"],
                    threads, kind=r["kind"])
        for r in records
    ]


# ── embed ───────────────────────────────────────────────────────────

@dataclass
class EmbedResult:
    result: TsneResult
    labels: list[str]
    silhouette: float
    scatter_path: Path
    report_path: Path
    summary: dict[str, Any] = field(default_factory=dict)


def run_embed(
    cfg: RunConfig,
    checkpoint_path: str | Path,
    threads: int = 1,
    use_projection: Optional[bool] = None,
    dataset: Optional[PatchDataset] = None,
) -> EmbedResult:
    """tSNE of held-out patch embeddings, capped at ``tsne.max_points`` by stratified sampling."""
    ckpt = Checkpoint.load(checkpoint_path)
    tc = cfg.tsne
    project = tc.use_projection if use_projection is None else use_projection
    if dataset is None:
        manifest, split = load_cohort(cfg)
        dataset = split_dataset(
            manifest, split.test_patients, checkpoint_preprocess(ckpt, cfg), threads
        )
    idx = stratified_sample(dataset.labels, tc.max_points, tc.seed)
    features, labels = extract_embeddings(
        ckpt, dataset.pixels[idx], dataset.labels[idx], project, threads
    )
    result = tsne(features, tc)
    score = silhouette(result.coords, labels)
    names = [CLASS_NAMES[int(i)] for i in labels]

    out = RunPaths.of(cfg).embed_dir(ckpt.objective or Path(checkpoint_path).stem)
    scatter_path = write_scatter(out / SCATTER_NAME, result.coords, names)
    summary = {
        "objective": ckpt.objective,
        "points": len(names),
        "available": len(dataset),
        "use_projection": project,
        "perplexity": tc.perplexity,
        "iterations": tc.iterations,
        "initial_kl": result.initial_kl,
        "final_kl": result.final_kl,
        "entropy_error": result.entropy_error,
        "silhouette": score,
        "class_counts": {n: names.count(n) for n in sorted(set(names))},
    }
    report_path = write_json_report(EMBED_REPORT_NAME, summary, out, stamp=False)
    cfg.write_resolved(out)

    coords, _ = read_scatter(scatter_path)
    if coords.shape != result.coords.shape:
        raise ContractError(f"{scatter_path} holds {len(coords)} rows, expected {len(names)}")
    log.info("pipeline.embedded", points=len(names), silhouette=score,
             final_kl=result.final_kl)
    return EmbedResult(result, names, score, scatter_path, report_path, summary)


# ── all ─────────────────────────────────────────────────────────────

@dataclass
class RunSummary:
    reports: dict[str, EvalReport] = field(default_factory=dict)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    segments: list[dict[str, Any]] = field(default_factory=list)
    embed: Optional[EmbedResult] = None
    table: str = ""


def run_all(
    cfg: RunConfig,
    objectives: tuple[str, ...] = ("ce", "simclr", "supcon"),
    threads: int = 1,
    regenerate: bool = False,
) -> RunSummary:
    """Generate (if needed), train, probe and evaluate each objective on one cohort.

    Segmentation and the embedding plot use the last objective listed.
    """
    if not objectives:
        raise ContractError("at least one objective is required")
    paths = RunPaths.of(cfg)
    if regenerate or not paths.manifest.exists():
        run_gen(cfg, threads)
    manifest, split = load_cohort(cfg)
    train_ds = split_dataset(manifest, split.train_patients, cfg.preprocess, threads)
    test_ds = split_dataset(manifest, split.test_patients, cfg.preprocess, threads)

    summary = RunSummary()
    for objective in objectives:
        ocfg = with_objective(cfg, objective)
        ckpt, path = run_train(ocfg, threads, train_ds)
        if not ckpt.has_probe:
            _, path = run_probe(ocfg, path, threads, train_ds)
        summary.checkpoints[objective] = path
        summary.reports[OBJECTIVE_TITLES.get(objective, objective)] = run_eval(
            ocfg, path, threads, test_ds, name=objective
        ).report

    summary.table = format_table(summary.reports)
    (paths.root / COMPARISON_TEXT_NAME).write_text(summary.table)
    write_json_report(
        COMPARISON_JSON_NAME,
        {"objectives": list(objectives),
         "grid": {name: rep.grid() for name, rep in summary.reports.items()},
         "majority_vote": {name: rep.majority_vote for name, rep in summary.reports.items()}},
        paths.root,
    )
    cfg.write_resolved(paths.root)

    final = summary.checkpoints[objectives[-1]]
    final_cfg = with_objective(cfg, objectives[-1])
    try:
        summary.segments = run_segment_fixtures(final_cfg, final, threads)
    except FileNotFoundError:
        log.warning("pipeline.no_fixtures", path=str(paths.fixtures))
    summary.embed = run_embed(final_cfg, final, threads, dataset=test_ds)
    return summary


def mean_fixture_iou(sidecars: list[dict[str, Any]], kind: str = "margin") -> Optional[float]:
    vals = [s["iou"] for s in sidecars if s.get("kind") == kind and "iou" in s]
    return float(np.mean(vals)) if vals else None

