"""Dataset manifest and patient-level train/test splits.

The manifest is a JSON array of ``{path, patient_id, slide_id, label,
center}`` objects. Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import ContractError, SplitError
from src.observability.logger import get_logger
from src.srh_io.labels import ClassLabel
from src.srh_io.slide_format import read_slide

log = get_logger(__name__)


class ManifestEntry(BaseModel):
    """One slide of the cohort."""
    model_config = ConfigDict(frozen=True)

    path: str
    patient_id: str
    slide_id: str
    label: ClassLabel
    center: str = ""

    @field_validator("label", mode="before")
    @classmethod
    def _parse_label(cls, v: object) -> ClassLabel:
        return ClassLabel.parse(v)  # type: ignore[arg-type]


class DatasetManifest(BaseModel):
    entries: list[ManifestEntry] = Field(default_factory=list)
    root: str = ""  # directory relative paths resolve against; not serialized

    @model_validator(mode="after")
    def _unique_slides(self) -> DatasetManifest:
        seen: set[str] = set()
        for e in self.entries:
            if e.slide_id in seen:
                raise ValueError(f"duplicate slide_id in manifest: {e.slide_id}")
            seen.add(e.slide_id)
        return self

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    @property
    def centers(self) -> list[str]:
        return sorted({e.center for e in self.entries if e.center})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root:
            p = Path(self.root) / p
        return p

    def for_patients(self, patients: Iterable[str]) -> list[ManifestEntry]:
        wanted = set(patients)
        return [e for e in self.entries if e.patient_id in wanted]

    def by_patient(self) -> dict[str, list[ManifestEntry]]:
        groups: dict[str, list[ManifestEntry]] = defaultdict(list)
        for e in self.entries:
            groups[e.patient_id].append(e)
        return dict(groups)

    def validate_files(self) -> None:
        """Every path must resolve to a well-formed slide file."""
        for e in self.entries:
            read_slide(self.resolve(e))

    def to_json(self) -> str:
        rows = [e.model_dump(mode="json") for e in self.entries]
        return json.dumps(rows, indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        with open(path) as f:
            rows = json.load(f)
        if not isinstance(rows, list):
            raise ValueError(f"manifest {path} must be a JSON array")
        return cls(entries=[ManifestEntry(**r) for r in rows], root=str(path.parent))


class SplitSpec(BaseModel):
    """Patient-disjoint train/test partition."""
    model_config = ConfigDict(frozen=True)

    train_patients: frozenset[str]
    test_patients: frozenset[str]
    seed: int = 0

    @property
    def overlap(self) -> frozenset[str]:
        return self.train_patients & self.test_patients

    def to_dict(self) -> dict[str, object]:
        return {
            "train_patients": sorted(self.train_patients),
            "test_patients": sorted(self.test_patients),
            "seed": self.seed,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> SplitSpec:
        with open(path) as f:
            raw = json.load(f)
        split = cls(**raw)
        if split.overlap:
            raise SplitError(f"split {path} shares patients {sorted(split.overlap)}")
        return split


def _held_out(test_fraction: float, n: int) -> int:
    return int(math.floor(test_fraction * n + 0.5))


def split_by_patient(
    manifest: DatasetManifest,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> SplitSpec:
    """Hold out ``round(test_fraction * n_c)`` whole patients from every class.

    Each class with at least two patients keeps one or more on each side.
    Patients that are alone in their class are pooled and split together.
    A patient's class is the label of its first slide.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(manifest) == 0:
        raise ContractError("manifest is empty")
    patients = manifest.patients
    n = len(patients)
    if n < 2:
        raise SplitError(f"need at least 2 patients to split, got {n}")

    by_class: dict[ClassLabel, list[str]] = defaultdict(list)
    for pid, slides in sorted(manifest.by_patient().items()):
        by_class[slides[0].label].append(pid)

    rng = np.random.default_rng(seed)
    test: set[str] = set()
    singles: list[str] = []
    for label in sorted(by_class, key=lambda c: c.class_index):
        members = by_class[label]
        if len(members) < 2:
            singles += members
            continue
        k = min(max(_held_out(test_fraction, len(members)), 1), len(members) - 1)
        order = rng.permutation(len(members))
        test.update(members[i] for i in order[:k])

    if singles:
        k = _held_out(test_fraction, len(singles))
        if len(singles) == n:
            k = min(max(k, 1), n - 1)
        order = rng.permutation(len(singles))
        test.update(singles[i] for i in order[:k])

    train = frozenset(patients) - test
    log.info("split.created", patients=n, train=len(train), test=len(test),
             classes=len(by_class), seed=seed)
    return SplitSpec(train_patients=train, test_patients=frozenset(test), seed=seed)
