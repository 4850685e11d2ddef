"""Write a synthetic cohort to disk: slides, manifest, margin fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from src.config import CohortConfig
from src.observability.logger import get_logger
from src.observability.metrics import metrics
from src.parallel import map_workers
from src.srh_io.labels import ALL_CLASSES, ClassLabel
from src.srh_io.manifest import DatasetManifest, ManifestEntry
from src.srh_io.slide_format import write_mask_pgm, write_slide
from src.srh_io.synthetic import (
    generate_synthetic_infiltration_slide,
    generate_synthetic_margin_slide,
    generate_synthetic_slide,
)

log = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
FIXTURES_NAME = "fixtures.json"

# (tumor, nontumor) pairs cycled through for margin and infiltration fixtures
MARGIN_PAIRS: list[tuple[ClassLabel, ClassLabel]] = [
    (ClassLabel.MENINGIOMA, ClassLabel.NONDIAGNOSTIC),
    (ClassLabel.PITUITARY_ADENOMA, ClassLabel.NORMAL_PITUITARY),
    (ClassLabel.SCHWANNOMA, ClassLabel.NORMAL_BRAIN),
    (ClassLabel.METASTASIS, ClassLabel.NORMAL_BRAIN),
    (ClassLabel.LYMPHOMA, ClassLabel.NORMAL_BRAIN),
]

_ABBREV = {
    ClassLabel.PITUITARY_ADENOMA: "PA",
    ClassLabel.MENINGIOMA: "MEN",
    ClassLabel.SCHWANNOMA: "SCH",
    ClassLabel.LYMPHOMA: "LYM",
    ClassLabel.METASTASIS: "MET",
    ClassLabel.NORMAL_BRAIN: "NB",
    ClassLabel.NORMAL_PITUITARY: "NP",
    ClassLabel.NONDIAGNOSTIC: "ND",
}


@dataclass(frozen=True)
class _SlideJob:
    label: ClassLabel
    patient_id: str
    slide_id: str
    patient_seed: int
    slide_seed: int
    center: str


def patient_seed_for(seed: int, patient_index: int) -> int:
    return seed * 100_000 + patient_index


def _plan(cfg: CohortConfig, seed: int) -> list[_SlideJob]:
    jobs: list[_SlideJob] = []
    centers = cfg.centers or [""]
    for label in ALL_CLASSES:
        for p in range(cfg.patients_per_class):
            patient_id = f"{_ABBREV[label]}-P{p:03d}"
            for s in range(cfg.slides_per_patient):
                jobs.append(_SlideJob(
                    label=label,
                    patient_id=patient_id,
                    slide_id=f"{patient_id}-S{s}",
                    patient_seed=patient_seed_for(seed, p),
                    slide_seed=s,
                    center=centers[p % len(centers)],
                ))
    return jobs


def generate_cohort(
    cfg: CohortConfig,
    out_dir: str | Path,
    seed: int = 0,
    patch_side: int = 300,
    threads: int = 1,
) -> DatasetManifest:
    """Generate every slide of the cohort plus margin fixtures under ``out_dir``."""
    out = Path(out_dir)
    slides_dir = out / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    jobs = _plan(cfg, seed)

    def _run(job: _SlideJob) -> ManifestEntry:
        img = generate_synthetic_slide(
            job.label, job.patient_seed, job.slide_seed,
            cfg.slide_height, cfg.slide_width, patch_side,
        )
        rel = Path("slides") / f"{job.slide_id}.srh"
        write_slide(img, out / rel)
        metrics.incr("cohort.slides_written")
        return ManifestEntry(
            path=rel.as_posix(),
            patient_id=job.patient_id,
            slide_id=job.slide_id,
            label=job.label,
            center=job.center,
        )

    entries = map_workers(_run, jobs, threads)
    manifest = DatasetManifest(entries=entries, root=str(out))
    manifest.save(out / MANIFEST_NAME)
    log.info("cohort.generated", slides=len(entries), patients=len(manifest.patients),
             out=str(out))

    generate_fixtures(cfg, out, seed, patch_side)
    return manifest


def generate_fixtures(
    cfg: CohortConfig,
    out_dir: str | Path,
    seed: int = 0,
    patch_side: int = 300,
) -> list[dict[str, Any]]:
    """Margin and infiltration slides with PGM masks, listed in fixtures.json."""
    out = Path(out_dir)
    records: list[dict[str, Any]] = []
    for i in range(cfg.margin_slides):
        tumor, nontumor = MARGIN_PAIRS[i % len(MARGIN_PAIRS)]
        mask_seed = seed * 1000 + i
        img, mask = generate_synthetic_margin_slide(
            tumor, nontumor, mask_seed, cfg.slide_height, cfg.slide_width,
            cfg.margin_fraction, patch_side,
        )
        records.append(_write_fixture(out, f"margin-{i:02d}", "margin", img, mask, tumor, nontumor))
    for i in range(cfg.infiltration_slides):
        tumor, nontumor = MARGIN_PAIRS[i % len(MARGIN_PAIRS)]
        img, mask = generate_synthetic_infiltration_slide(
            tumor, nontumor, seed * 1000 + 500 + i, cfg.slide_height, cfg.slide_width,
            patch_side=patch_side,
        )
        records.append(_write_fixture(out, f"infiltration-{i:02d}", "infiltration", img, mask,
                                      tumor, nontumor))
    (out / FIXTURES_NAME).write_text(json.dumps(records, indent=2) + "\n")
    return records


def _write_fixture(
    out: Path,
    name: str,
    kind: str,
    img: Any,
    mask: Any,
    tumor: ClassLabel,
    nontumor: ClassLabel,
) -> dict[str, Any]:
    slide_rel = Path("fixtures") / f"{name}.srh"
    mask_rel = Path("fixtures") / f"{name}.pgm"
    write_slide(img, out / slide_rel)
    write_mask_pgm(mask, out / mask_rel)
    return {
        "name": name,
        "kind": kind,
        "slide": slide_rel.as_posix(),
        "mask": mask_rel.as_posix(),
        "tumor": tumor.value,
        "nontumor": nontumor.value,
        "tumor_fraction": round(float(mask.mean()), 6),
    }
