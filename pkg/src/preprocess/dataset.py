"""In-memory patch dataset built from manifest slides.

Pipeline per slide: read -> 3-channel -> tile at ``patch_side`` -> filter at
full resolution -> area-downsample to ``input_side`` for the network.

Automated annotation: a patch inherits its slide's label unless the filter
calls it nondiagnostic, in which case it is labeled nondiagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.config import PreprocessConfig
from src.errors import ContractError
from src.observability.logger import get_logger
from src.observability.metrics import metrics
from src.parallel import map_workers
from src.preprocess.channels import downsample, to_three_channel
from src.preprocess.patch_cache import read_patch_cache, write_patch_cache
from src.preprocess.patch_filter import FilterDecision, filter_patch
from src.preprocess.tiling import Patch, tile
from src.srh_io.labels import ClassLabel
from src.srh_io.manifest import DatasetManifest, ManifestEntry
from src.srh_io.slide_format import read_slide

log = get_logger(__name__)

_ND = ClassLabel.NONDIAGNOSTIC.class_index


@dataclass
class PatchDataset:
    """Column-oriented patch store; row ``i`` of every array is one patch."""
    pixels: np.ndarray        # (N, 3, s, s) float32 in [0, 1], unstandardized
    labels: np.ndarray        # (N,) int64 annotated patch label
    slide_labels: np.ndarray  # (N,) int64 label of the source slide
    slide_ids: np.ndarray     # (N,) str
    patient_ids: np.ndarray   # (N,) str
    centers: np.ndarray       # (N,) str
    offsets: np.ndarray       # (N, 2) int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def side(self) -> int:
        return int(self.pixels.shape[-1])

    @property
    def diagnostic(self) -> np.ndarray:
        """Mask of patches the filter did not mark nondiagnostic."""
        return self.labels != _ND

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, index: np.ndarray | Sequence[int]) -> PatchDataset:
        idx = np.asarray(index)
        return PatchDataset(
            pixels=self.pixels[idx],
            labels=self.labels[idx],
            slide_labels=self.slide_labels[idx],
            slide_ids=self.slide_ids[idx],
            patient_ids=self.patient_ids[idx],
            centers=self.centers[idx],
            offsets=self.offsets[idx],
        )

    def for_patients(self, patients: set[str] | frozenset[str]) -> PatchDataset:
        mask = np.isin(self.patient_ids, sorted(patients))
        return self.subset(np.flatnonzero(mask))

    def patch(self, i: int) -> Patch:
        return Patch(
            pixels=self.pixels[i],
            slide_id=str(self.slide_ids[i]),
            patient_id=str(self.patient_ids[i]),
            offset=(int(self.offsets[i, 0]), int(self.offsets[i, 1])),
            label=ClassLabel.from_index(int(self.labels[i])),
        )

    @classmethod
    def empty(cls, side: int) -> PatchDataset:
        return cls(
            pixels=np.zeros((0, 3, side, side), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            slide_labels=np.zeros(0, dtype=np.int64),
            slide_ids=np.array([], dtype=str),
            patient_ids=np.array([], dtype=str),
            centers=np.array([], dtype=str),
            offsets=np.zeros((0, 2), dtype=np.int64),
        )

    @classmethod
    def from_patches(
        cls,
        patches: list[Patch],
        slide_labels: Sequence[ClassLabel],
        centers: Sequence[str],
    ) -> PatchDataset:
        if not patches:
            raise ContractError("cannot build a dataset from zero patches")
        return cls(
            pixels=np.stack([p.pixels for p in patches]).astype(np.float32),
            labels=np.array(
                [p.label.class_index if p.label is not None else _ND for p in patches],
                dtype=np.int64,
            ),
            slide_labels=np.array([lbl.class_index for lbl in slide_labels], dtype=np.int64),
            slide_ids=np.array([p.slide_id for p in patches]),
            patient_ids=np.array([p.patient_id for p in patches]),
            centers=np.array(list(centers)),
            offsets=np.array([p.offset for p in patches], dtype=np.int64).reshape(-1, 2),
        )


def annotate(slide_label: ClassLabel, decision: FilterDecision) -> ClassLabel:
    if decision is FilterDecision.NONDIAGNOSTIC:
        return ClassLabel.NONDIAGNOSTIC
    return slide_label


def model_patches(
    image: np.ndarray,
    cfg: PreprocessConfig,
    stride: Optional[int] = None,
    slide_id: str = "",
    patient_id: str = "",
    slide_label: Optional[ClassLabel] = None,
) -> tuple[list[Patch], list[FilterDecision]]:
    """Tile a 3-channel image, filter each tile, and shrink it to model resolution."""
    step = stride if stride is not None else cfg.effective_stride
    out: list[Patch] = []
    decisions: list[FilterDecision] = []
    for p in tile(image, cfg.patch_side, step, slide_id, patient_id, slide_label):
        decision = filter_patch(p, cfg.filter_var_threshold, cfg.filter_mean_threshold)
        label = annotate(slide_label, decision) if slide_label is not None else None
        small = downsample(p.pixels, cfg.input_side)
        out.append(Patch(small, p.slide_id, p.patient_id, p.offset, label))
        decisions.append(decision)
    return out, decisions


def _cache_path(cache_dir: Path, entry: ManifestEntry, cfg: PreprocessConfig) -> Path:
    tag = f"p{cfg.patch_side}s{cfg.effective_stride}i{cfg.input_side}"
    return cache_dir / f"{entry.slide_id}.{tag}.bin"


def slide_patches(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    cfg: PreprocessConfig,
) -> list[Patch]:
    """Annotated model-resolution patches of one slide, through the cache when set."""
    cache = _cache_path(Path(cfg.cache_dir), entry, cfg) if cfg.cache_dir else None
    if cache is not None and cache.exists():
        metrics.incr("preprocess.cache_hits")
        return read_patch_cache(cache, cfg.input_side, entry.slide_id, entry.patient_id)

    image = to_three_channel(read_slide(manifest.resolve(entry)))
    patches, decisions = model_patches(
        image, cfg, slide_id=entry.slide_id, patient_id=entry.patient_id,
        slide_label=entry.label,
    )
    for d in decisions:
        metrics.incr(f"preprocess.filter.{d.value}")
    if cache is not None:
        write_patch_cache(patches, cache)
    return patches


def build_patch_dataset(
    manifest: DatasetManifest,
    entries: Optional[Sequence[ManifestEntry]],
    cfg: PreprocessConfig,
    threads: int = 1,
) -> PatchDataset:
    """Patches of ``entries`` (default: every manifest slide), in manifest order."""
    chosen = list(manifest.entries if entries is None else entries)
    if not chosen:
        raise ContractError("no slides selected for the patch dataset")

    per_slide = map_workers(lambda e: slide_patches(manifest, e, cfg), chosen, threads)
    patches: list[Patch] = []
    slide_labels: list[ClassLabel] = []
    centers: list[str] = []
    for entry, ps in zip(chosen, per_slide):
        patches.extend(ps)
        slide_labels.extend([entry.label] * len(ps))
        centers.extend([entry.center] * len(ps))

    ds = PatchDataset.from_patches(patches, slide_labels, centers)
    log.info(
        "dataset.built",
        slides=len(chosen),
        patches=len(ds),
        nondiagnostic=int((~ds.diagnostic).sum()),
        side=ds.side,
    )
    return ds
