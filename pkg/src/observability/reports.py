"""Run reports: JSON artifacts written next to command outputs."""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path
from typing import Any

from src.observability.logger import get_logger
from src.observability.metrics import metrics

log = get_logger(__name__)


def write_json_report(
    name: str,
    payload: dict[str, Any],
    output_dir: str | Path,
    include_metrics: bool = False,
    stamp: bool = True,
) -> Path:
    """Write ``payload`` as indented JSON to ``output_dir/name``.

    ``stamp`` adds a UTC ``generated_at`` field; turn it off for artifacts
    that must be byte-identical across reruns.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    report: dict[str, Any] = dict(payload)
    if stamp:
        report["generated_at"] = dt.datetime.now(dt.timezone.utc).isoformat()
    if include_metrics:
        report["metrics_snapshot"] = metrics.snapshot()

    filepath = out / name
    with open(filepath, "w") as f:
        json.dump(report, f, indent=2, sort_keys=False, default=str)
        f.write("\n")

    log.info("report.written", path=str(filepath))
    return filepath


def read_json_report(path: str | Path) -> dict[str, Any]:
    """Load a report back; used by the CLI to validate what it wrote."""
    with open(path) as f:
        data: dict[str, Any] = json.load(f)
    return data
