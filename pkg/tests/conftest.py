"""Shared test fixtures."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

import numpy as np
import pytest

# Ensure src is importable
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.config import RunConfig  # noqa: E402
from src.observability.metrics import metrics  # noqa: E402
from src.pipeline import RunSummary, run_all  # noqa: E402
from src.preprocess.dataset import PatchDataset  # noqa: E402


def tiny_config(out_dir: Path | str, **sections: dict[str, Any]) -> RunConfig:
    """A RunConfig small enough to run the whole pipeline in seconds.

    64 px slides cut into four 32 px patches, 8 px model input, a two-block
    CNN and a short tSNE. ``sections`` merge into the matching config section.
    """
    raw: dict[str, Any] = {
        "cohort": dict(patients_per_class=3, slides_per_patient=1, slide_height=64,
                       slide_width=64, test_fraction=0.34, margin_slides=1,
                       infiltration_slides=1),
        "preprocess": dict(patch_side=32, input_side=8),
        "model": dict(conv_channels=[2, 3], feature_dim=6, projection_dim=3),
        "train": dict(objective="ce", batch_size=8, epochs=1, lr=0.01),
        "probe": dict(epochs=2, batch_size=16, lr=0.01),
        "segment": dict(stride=16),
        "tsne": dict(perplexity=3.0, iterations=100, max_points=40),
    }
    for name, values in sections.items():
        if isinstance(values, dict) and isinstance(raw.get(name), dict):
            raw[name] = {**raw[name], **values}
        else:
            raw[name] = values
    raw.setdefault("out_dir", str(out_dir))
    raw.setdefault("deterministic", True)
    return RunConfig(**raw)


def desk_config(out_dir: Path | str) -> RunConfig:
    """The default cohort's 50 patients per class (40 train / 10 test) on
    128 px slides, cut into 32 px patches and fed to the network at 16 px."""
    return RunConfig(
        cohort=dict(patients_per_class=50, slide_height=128, slide_width=128,
                    margin_slides=0, infiltration_slides=0),
        preprocess=dict(patch_side=32, input_side=16),
        model=dict(conv_channels=[8, 16, 32], feature_dim=32, projection_dim=16),
        train=dict(epochs=15),
        probe=dict(epochs=20, lr=3.0e-3),
        segment=dict(stride=8),
        tsne=dict(perplexity=20.0, iterations=300, max_points=400),
        out_dir=str(out_dir),
        deterministic=True,
    )


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory: pytest.TempPathFactory) -> tuple[RunConfig, RunSummary]:
    """All three objectives trained, probed and evaluated on one desk cohort."""
    cfg = desk_config(tmp_path_factory.mktemp("desk") / "run")
    return cfg, run_all(cfg, ("ce", "simclr", "supcon"))


@pytest.fixture(autouse=True)
def _fresh_metrics() -> None:
    metrics.reset()


@pytest.fixture
def tiny_cfg(tmp_path: Path) -> RunConfig:
    return tiny_config(tmp_path / "run")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def toy_dataset(per_class: int = 6, classes: tuple[int, ...] = (0, 1), side: int = 8,
                seed: int = 0, patients_per_class: int = 2) -> PatchDataset:
    """Separable patches: class ``c`` is bright in channel ``c % 3`` with a
    class-specific stripe period, plus mild noise."""
    rng = np.random.default_rng(seed)
    pixels, labels, slides, patients = [], [], [], []
    for c in classes:
        base = np.full((3, side, side), 0.2)
        base[c % 3] = 0.8
        base[:, :, :: 2 + c // 3] += 0.1
        for i in range(per_class):
            pixels.append(np.clip(base + rng.normal(0.0, 0.03, base.shape), 0.0, 1.0))
            labels.append(c)
            pid = f"P{c}-{i % patients_per_class}"
            patients.append(pid)
            slides.append(f"{pid}-S0")
    n = len(labels)
    return PatchDataset(
        pixels=np.array(pixels, dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        slide_labels=np.array(labels, dtype=np.int64),
        slide_ids=np.array(slides),
        patient_ids=np.array(patients),
        centers=np.array(["C0"] * n),
        offsets=np.zeros((n, 2), dtype=np.int64),
    )
