#!/usr/bin/env python3
"""Brute-force the patch filter thresholds against the synthetic generator.

Every generated patch gets its expected decision from its slide label
(nondiagnostic class -> nondiagnostic, tumor classes -> tumor_candidate,
normal tissue -> normal_candidate). T_var and T_mean are swept over grids
and the pair with the best agreement is printed next to the current config.

    python scripts/calibrate_filter.py --patients 4 --side 300
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np
from rich.console import Console
from rich.table import Table

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.config import load_config  # noqa: E402
from src.preprocess.channels import to_three_channel  # noqa: E402
from src.preprocess.patch_filter import FilterDecision, b_channel_stats  # noqa: E402
from src.preprocess.tiling import tile  # noqa: E402
from src.srh_io.labels import ALL_CLASSES, ClassLabel  # noqa: E402
from src.srh_io.synthetic import generate_synthetic_slide  # noqa: E402

console = Console()

_CODES = {
    FilterDecision.NONDIAGNOSTIC: 0,
    FilterDecision.TUMOR_CANDIDATE: 1,
    FilterDecision.NORMAL_CANDIDATE: 2,
}


def expected_decision(label: ClassLabel) -> FilterDecision:
    if label is ClassLabel.NONDIAGNOSTIC:
        return FilterDecision.NONDIAGNOSTIC
    if label.is_tumor:
        return FilterDecision.TUMOR_CANDIDATE
    return FilterDecision.NORMAL_CANDIDATE


def patch_stats(patients: int, side: int, slide: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means, variances, expected = [], [], []
    for label in ALL_CLASSES:
        for p in range(patients):
            raw = generate_synthetic_slide(label, 90_000 + p, 0, slide, slide, side)
            img = to_three_channel(raw)
            for patch in tile(img, side, side):
                m, v = b_channel_stats(patch.pixels)
                means.append(m)
                variances.append(v)
                expected.append(_CODES[expected_decision(label)])
    return np.array(means), np.array(variances), np.array(expected)


def agreement(means: np.ndarray, variances: np.ndarray, expected: np.ndarray,
              t_var: float, t_mean: float) -> float:
    decided = np.where(variances < t_var, 0, np.where(means > t_mean, 1, 2))
    return float((decided == expected).mean())


@click.command()
@click.option("--patients", default=4, help="Patients per class")
@click.option("--side", default=300, help="Patch side in pixels")
@click.option("--slide", default=900, help="Slide side in pixels")
@click.option("--config", "config_path", default=None, help="Config to compare against")
def main(patients: int, side: int, slide: int, config_path: str | None) -> None:
    cfg = load_config(config_path).preprocess
    with console.status("[bold green]Generating patches..."):
        means, variances, expected = patch_stats(patients, side, slide)

    var_grid = np.geomspace(max(variances.min(), 1e-9), variances.max(), 60)
    mean_grid = np.linspace(means.min(), means.max(), 60)
    best = (-1.0, 0.0, 0.0)
    for tv in var_grid:
        for tm in mean_grid:
            score = agreement(means, variances, expected, tv, tm)
            if score > best[0]:
                best = (score, float(tv), float(tm))

    table = Table(title=f"Filter calibration ({len(expected)} patches)")
    table.add_column("Thresholds", style="cyan")
    table.add_column("T_var", justify="right")
    table.add_column("T_mean", justify="right")
    table.add_column("Agreement", justify="right")
    current = agreement(means, variances, expected,
                        cfg.filter_var_threshold, cfg.filter_mean_threshold)
    table.add_row("config", f"{cfg.filter_var_threshold:.3g}",
                  f"{cfg.filter_mean_threshold:.3f}", f"{current:.1%}")
    table.add_row("best", f"{best[1]:.3g}", f"{best[2]:.3f}", f"{best[0]:.1%}")
    console.print(table)

    per_class = Table(title="B-channel statistics per expected decision")
    per_class.add_column("Decision")
    per_class.add_column("Mean range", justify="right")
    per_class.add_column("Variance range", justify="right")
    for decision, code in _CODES.items():
        sel = expected == code
        per_class.add_row(
            decision.value,
            f"{means[sel].min():.3f} … {means[sel].max():.3f}",
            f"{variances[sel].min():.2e} … {variances[sel].max():.2e}",
        )
    console.print(per_class)


if __name__ == "__main__":
    main()
