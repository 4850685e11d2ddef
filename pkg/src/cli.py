"""CLI entry point for the SRH skull-base tumor pipeline.

Commands:
  srh gen                       Generate the synthetic cohort, manifest and split
  srh train --objective         Train the feature extractor (ce | simclr | supcon)
  srh probe --checkpoint        Fit the linear probe on frozen features
  srh eval --checkpoint         Patch / slide / patient metric grid on held-out patients
  srh segment --checkpoint      Probability heatmaps and overlays (one slide or all fixtures)
  srh embed --checkpoint        tSNE scatter of held-out patch embeddings
  srh all                       Every objective end to end, plus the comparison table
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import click
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from src.config import RunConfig, load_config
from src.errors import SrhError
from src.evaluate.testset import EvalReport
from src.observability.logger import bind_run_context, configure_logging, get_logger
from src.pipeline import (
    RunPaths,
    mean_fixture_iou,
    run_all,
    run_embed,
    run_eval,
    run_gen,
    run_probe,
    run_segment,
    run_segment_fixtures,
    run_train,
    with_objective,
)
from src.srh_io.labels import ALL_CLASSES

load_dotenv()

console = Console()
err_console = Console(stderr=True)
log = get_logger(__name__)

OBJECTIVES = ("ce", "simclr", "supcon")


def _guarded(fn: Callable[..., None]) -> Callable[..., None]:
    """Map pipeline failures to a red diagnostic on stderr and exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            fn(*args, **kwargs)
        except (SrhError, OSError, ValidationError) as e:
            log.error("cli.failed", command=fn.__name__, error=str(e), kind=type(e).__name__)
            err_console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--config", "config_path", default=None, help="Path to a JSON or YAML config")
@click.option("--seed", type=int, default=None, help="Global seed (overrides every section seed)")
@click.option("--out", "out_dir", default=None, help="Run output directory")
@click.option("--deterministic", is_flag=True, default=False,
              help="Single-threaded numeric paths for bit-identical reruns")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    out_dir: Optional[str],
    deterministic: bool,
    log_level: Optional[str],
) -> None:
    """SRH skull-base tumor pipeline: synthetic cohort, training, evaluation, heatmaps."""
    ctx.ensure_object(dict)
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        updates: dict[str, Any] = {}
        if out_dir is not None:
            updates["out_dir"] = out_dir
        if deterministic:
            updates["deterministic"] = True
        if log_level is not None:
            updates["observability"] = cfg.observability.model_copy(
                update={"log_level": log_level}
            )
        if updates:
            cfg = cfg.model_copy(update=updates)
    except (ValidationError, OSError, ValueError) as e:
        err_console.print(f"[red]❌ Invalid configuration: {e}[/red]")
        sys.exit(1)
    ctx.obj["config"] = cfg
    ctx.obj["threads"] = cfg.resolve_threads()
    configure_logging(
        level=cfg.observability.log_level,
        fmt=cfg.observability.log_format,
        log_file=cfg.observability.log_file,
        force=True,
    )
    bind_run_context(out_dir=cfg.out_dir, seed=cfg.seed, threads=ctx.obj["threads"])


def _checkpoint_path(cfg: RunConfig, checkpoint: Optional[str], objective: str) -> Path:
    return Path(checkpoint) if checkpoint else RunPaths.of(cfg).checkpoint(objective)


def _grid_table(title: str, reports: dict[str, EvalReport]) -> Table:
    table = Table(title=title)
    table.add_column("Model", style="cyan")
    for level in ("Patch", "Slide", "Patient"):
        for metric in ("Top-1", "Top-2", "MCA"):
            table.add_column(f"{level}\n{metric}", justify="right")
    for name, rep in reports.items():
        cells = []
        for cell in rep.grid().values():
            cells += [f"{cell['acc']:.1%}", f"{cell['top2']:.1%}", f"{cell['mca']:.1%}"]
        table.add_row(name, *cells)
    return table


# ─── GEN ─────────────────────────────────────────────────────────────

@cli.command()
@click.pass_context
@_guarded
def gen(ctx: click.Context) -> None:
    """Generate the synthetic cohort, margin fixtures and patient split."""
    cfg: RunConfig = ctx.obj["config"]
    with console.status("[bold green]Generating slides..."):
        result = run_gen(cfg, ctx.obj["threads"])

    counts = {c: 0 for c in ALL_CLASSES}
    for e in result.manifest.entries:
        counts[e.label] += 1
    table = Table(title=f"Cohort ({len(result.manifest)} slides)")
    table.add_column("Class", style="cyan")
    table.add_column("Slides", justify="right")
    for label, n in counts.items():
        table.add_row(label.value, str(n))
    console.print(table)
    console.print(
        f"Patients: {len(result.split.train_patients)} train / "
        f"{len(result.split.test_patients)} test · fixtures: {len(result.fixtures)}"
    )
    console.print(f"[green]✓[/green] Cohort written to {RunPaths.of(cfg).cohort}")


# ─── TRAIN ───────────────────────────────────────────────────────────

@cli.command()
@click.option("--objective", type=click.Choice(OBJECTIVES), default=None,
              help="Training objective (default: config train.objective)")
@click.pass_context
@_guarded
def train(ctx: click.Context, objective: Optional[str]) -> None:
    """Train the feature extractor on the training patients."""
    cfg: RunConfig = ctx.obj["config"]
    if objective is not None:
        cfg = with_objective(cfg, objective)
    with console.status(f"[bold green]Training ({cfg.train.objective})..."):
        ckpt, path = run_train(cfg, ctx.obj["threads"])

    table = Table(title=f"Training ({cfg.train.objective})")
    table.add_column("Epoch", justify="right")
    table.add_column("Mean loss", justify="right")
    table.add_column("Steps", justify="right")
    for h in ckpt.history:
        if h.get("phase") == "extractor":
            table.add_row(str(h["epoch"]), f"{h['loss']:.4f}", str(h["steps"]))
    console.print(table)
    console.print(f"[green]✓[/green] Checkpoint written to {path}")
    if not ckpt.has_probe:
        console.print(f"[yellow]Next: srh probe --checkpoint {path}[/yellow]")


# ─── PROBE ───────────────────────────────────────────────────────────

@cli.command()
@click.option("--checkpoint", default=None, help="Checkpoint file (default: the run's)")
@click.pass_context
@_guarded
def probe(ctx: click.Context, checkpoint: Optional[str]) -> None:
    """Fit the linear classification layer on frozen extractor features."""
    cfg: RunConfig = ctx.obj["config"]
    path = _checkpoint_path(cfg, checkpoint, cfg.train.objective)
    with console.status("[bold green]Fitting linear probe..."):
        ckpt, path = run_probe(cfg, path, ctx.obj["threads"])
    summary = next((h for h in reversed(ckpt.history) if h.get("phase") == "probe_summary"), {})
    if "train_accuracy" in summary:
        console.print(f"Training-patch accuracy: {summary['train_accuracy']:.1%}")
    console.print(f"[green]✓[/green] Probe stored in {path}")


# ─── EVAL ────────────────────────────────────────────────────────────

@cli.command("eval")
@click.option("--checkpoint", default=None, help="Checkpoint file (default: the run's)")
@click.pass_context
@_guarded
def eval_cmd(ctx: click.Context, checkpoint: Optional[str]) -> None:
    """Evaluate a probed checkpoint on the held-out patients."""
    cfg: RunConfig = ctx.obj["config"]
    path = _checkpoint_path(cfg, checkpoint, cfg.train.objective)
    with console.status("[bold green]Evaluating..."):
        result = run_eval(cfg, path, ctx.obj["threads"])
    rep = result.report
    console.print(_grid_table("Held-out test set", {rep.objective or "model": rep}))
    for level, acc in rep.majority_vote.items():
        soft = rep.levels[level].metrics.acc
        console.print(f"  {level}: soft {soft:.1%} · majority vote {acc:.1%}")
    console.print(f"[green]✓[/green] Report: {result.json_path} · {result.text_path}")


# ─── SEGMENT ─────────────────────────────────────────────────────────

@cli.command()
@click.option("--checkpoint", default=None, help="Checkpoint file (default: the run's)")
@click.option("--slide", default=None, help="SRH1 slide file (default: every fixture)")
@click.option("--mask", default=None, help="Ground-truth PGM mask for IoU")
@click.option("--mode", type=click.Choice(["two", "rgb"]), default=None,
              help="Heatmap view (default: config segment.mode)")
@click.option("--base", type=click.Choice(["gray", "he"]), default=None,
              help="Overlay base image (default: config segment.base)")
@click.pass_context
@_guarded
def segment(
    ctx: click.Context,
    checkpoint: Optional[str],
    slide: Optional[str],
    mask: Optional[str],
    mode: Optional[str],
    base: Optional[str],
) -> None:
    """Sliding-window probability heatmaps with tumor/nontumor overlays."""
    cfg: RunConfig = ctx.obj["config"]
    updates = {k: v for k, v in (("mode", mode), ("base", base)) if v is not None}
    if updates:
        cfg = cfg.model_copy(update={"segment": cfg.segment.model_copy(update=updates)})
    path = _checkpoint_path(cfg, checkpoint, cfg.train.objective)
    threads = ctx.obj["threads"]
    with console.status("[bold green]Segmenting..."):
        if slide is not None:
            sidecars = [run_segment(cfg, path, slide, mask, threads)]
        else:
            sidecars = run_segment_fixtures(cfg, path, threads)

    table = Table(title="Segmentation")
    table.add_column("Slide", style="cyan")
    table.add_column("Tumor")
    table.add_column("Nontumor")
    table.add_column("IoU", justify="right")
    table.add_column("Covered", justify="right")
    for s in sidecars:
        iou = f"{s['iou']:.3f}" if "iou" in s else "—"
        table.add_row(Path(s["slide"]).stem, s["tumor_class"], s["nontumor_class"], iou,
                      f"{s['coverage']['covered_fraction']:.1%}")
    console.print(table)
    margin = mean_fixture_iou(sidecars)
    if margin is not None:
        console.print(f"Mean margin IoU: {margin:.3f}")
    console.print(f"[green]✓[/green] Outputs in {RunPaths.of(cfg).segment_dir}")


# ─── EMBED ───────────────────────────────────────────────────────────

@cli.command()
@click.option("--checkpoint", default=None, help="Checkpoint file (default: the run's)")
@click.option("--use-projection", is_flag=True, default=None,
              help="Embed projection-head outputs instead of extractor features")
@click.pass_context
@_guarded
def embed(ctx: click.Context, checkpoint: Optional[str], use_projection: Optional[bool]) -> None:
    """tSNE of held-out patch embeddings, exported as a scatter CSV."""
    cfg: RunConfig = ctx.obj["config"]
    path = _checkpoint_path(cfg, checkpoint, cfg.train.objective)
    with console.status("[bold green]Running tSNE..."):
        result = run_embed(cfg, path, ctx.obj["threads"], use_projection or None)
    s = result.summary
    console.print(
        f"{s['points']} of {s['available']} patches · KL {s['initial_kl']:.3f} → "
        f"{s['final_kl']:.3f} · silhouette {s['silhouette']:.3f}"
    )
    console.print(f"[green]✓[/green] Scatter: {result.scatter_path}")


# ─── ALL ─────────────────────────────────────────────────────────────

@cli.command("all")
@click.option("--objectives", default=",".join(OBJECTIVES),
              help="Comma-separated objectives to compare")
@click.option("--regenerate", is_flag=True, help="Regenerate the cohort even if present")
@click.pass_context
@_guarded
def all_cmd(ctx: click.Context, objectives: str, regenerate: bool) -> None:
    """Generate, train every objective, probe, evaluate, segment and embed."""
    cfg: RunConfig = ctx.obj["config"]
    chosen = tuple(o.strip() for o in objectives.split(",") if o.strip())
    unknown = [o for o in chosen if o not in OBJECTIVES]
    if unknown:
        raise click.BadParameter(f"unknown objectives: {', '.join(unknown)}",
                                 param_hint="--objectives")
    summary = run_all(cfg, chosen, ctx.obj["threads"], regenerate)

    console.print(_grid_table("Model performance on the held-out test set", summary.reports))
    margin = mean_fixture_iou(summary.segments)
    if margin is not None:
        console.print(f"Mean margin IoU ({chosen[-1]}): {margin:.3f}")
    if summary.embed is not None:
        console.print(f"tSNE silhouette ({chosen[-1]}): {summary.embed.silhouette:.3f}")
    console.print(f"[green]✓[/green] Run complete: {RunPaths.of(cfg).root}")


def main() -> None:
    cli(obj={})


if __name__ == "__main__":
    main()
