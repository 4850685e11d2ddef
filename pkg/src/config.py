"""Shared configuration loader and Pydantic settings.

Supports:
  - JSON or YAML config files (parsed with PyYAML, JSON is a YAML subset)
  - Env var overrides (SRH_THREADS, SRH_SEED, SRH_LOG_LEVEL, ...)
  - CLI flag overrides applied last by the command group
  - Resolved-config dumps written next to every command's outputs

Precedence: defaults < config file < environment < CLI flags.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator


_PROJECT_ROOT = Path(__file__).resolve().parent.parent

RESOLVED_CONFIG_NAME = "resolved_config.json"


class CohortConfig(BaseModel):
    """Synthetic cohort standing in for the clinical data set."""
    patients_per_class: int = 50
    slides_per_patient: int = 1
    slide_height: int = 900
    slide_width: int = 900
    test_fraction: float = 0.2
    centers: list[str] = Field(default_factory=lambda: ["UM", "NYU"])
    margin_slides: int = 4
    margin_fraction: float = 0.5
    infiltration_slides: int = 2

    @field_validator("test_fraction")
    @classmethod
    def _fraction_open_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {v}")
        return v

    @field_validator("patients_per_class", "slides_per_patient")
    @classmethod
    def _positive_counts(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"count must be >= 1, got {v}")
        return v


class AugmentationConfig(BaseModel):
    """The transformation set sampled by ``augment_pair``."""
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    blur_sigma_max: float = 1.5
    crop_scale_min: float = 0.7
    intensity_jitter: float = 0.10
    transforms: list[str] = Field(
        default_factory=lambda: ["hflip", "vflip", "blur", "crop", "jitter"]
    )

    @field_validator("transforms")
    @classmethod
    def _known_transforms(cls, v: list[str]) -> list[str]:
        known = {"hflip", "vflip", "blur", "crop", "jitter"}
        unknown = set(v) - known
        if unknown:
            raise ValueError(f"unknown transforms: {sorted(unknown)}")
        return v


class PreprocessConfig(BaseModel):
    patch_side: int = 300
    input_side: int = 75           # patches are area-downsampled to this before the network
    stride: Optional[int] = None   # None -> patch_side (nonoverlapping)
    filter_var_threshold: float = 1.0e-4   # T_var on the B channel
    filter_mean_threshold: float = 0.41    # T_mean on the B channel
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _sides(self) -> PreprocessConfig:
        if self.patch_side < 4:
            raise ValueError(f"patch_side must be >= 4, got {self.patch_side}")
        if not 4 <= self.input_side <= self.patch_side:
            raise ValueError(
                f"input_side must be in [4, patch_side], got {self.input_side}"
            )
        if self.stride is not None and self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        return self

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else self.patch_side


class ModelConfig(BaseModel):
    """Feature extractor topology: conv blocks -> pooled feature -> projection."""
    conv_channels: list[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    conv_stride: int = 2
    feature_dim: int = 128
    projection_dim: int = 32
    init_seed: int = 0

    @model_validator(mode="after")
    def _dims(self) -> ModelConfig:
        if not self.feature_dim >= self.projection_dim >= 2:
            raise ValueError(
                "need feature_dim >= projection_dim >= 2, got "
                f"{self.feature_dim} / {self.projection_dim}"
            )
        if not self.conv_channels:
            raise ValueError("at least one conv block is required")
        return self


Objective = Literal["ce", "simclr", "supcon"]


class TrainConfig(BaseModel):
    objective: Objective = "supcon"
    batch_size: Optional[int] = None   # None -> 176 contrastive, 64 ce
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    temperature: float = 0.07
    class_balanced: bool = True
    grad_clip_norm: Optional[float] = 5.0   # global L2 norm; None disables
    seed: int = 0

    @field_validator("temperature")
    @classmethod
    def _positive_tau(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"temperature must be positive, got {v}")
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch_at_least_two(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 2:
            raise ValueError(f"batch_size must be >= 2, got {v}")
        return v

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 64 if self.objective == "ce" else 176


class ProbeConfig(BaseModel):
    """Linear classification layer trained on frozen features (Adam)."""
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1.0e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    seed: int = 0


class EvalConfig(BaseModel):
    exclude_nondiagnostic: bool = True
    top_k: int = 2


class SegmentConfig(BaseModel):
    stride: Optional[int] = None   # None -> patch_side // 3
    alpha: float = 0.5
    mode: Literal["two", "rgb"] = "two"
    base: Literal["gray", "he"] = "gray"

    @field_validator("alpha")
    @classmethod
    def _unit_alpha(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {v}")
        return v

    def effective_stride(self, patch_side: int) -> int:
        if self.stride is not None:
            return self.stride
        return max(1, patch_side // 3)


class TsneConfig(BaseModel):
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_switch_iter: int = 250
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    max_points: int = 2000
    use_projection: bool = False
    seed: int = 0


class ObservabilityConfig(BaseModel):
    log_level: str = "INFO"
    log_format: Literal["console", "json"] = "console"
    log_file: Optional[str] = None


_SEEDED_SECTIONS = ("train", "probe", "tsne")


class RunConfig(BaseModel):
    cohort: CohortConfig = Field(default_factory=CohortConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    segment: SegmentConfig = Field(default_factory=SegmentConfig)
    tsne: TsneConfig = Field(default_factory=TsneConfig)
    observability: ObservabilityConfig = Field(default_factory=ObservabilityConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = False
    threads: Optional[int] = None

    @model_validator(mode="after")
    def _propagate_seed(self) -> RunConfig:
        # Sections that did not pin their own seed follow the global one.
        for name in _SEEDED_SECTIONS:
            section = getattr(self, name)
            if "seed" not in section.model_fields_set:
                section.seed = self.seed
        if "init_seed" not in self.model.model_fields_set:
            self.model.init_seed = self.seed
        return self

    def with_seed(self, seed: int) -> RunConfig:
        """Copy with the global seed and every section seed set to ``seed``."""
        raw = self.model_dump()
        raw["seed"] = seed
        for name in _SEEDED_SECTIONS:
            raw[name]["seed"] = seed
        raw["model"]["init_seed"] = seed
        return RunConfig(**raw)

    def resolve_threads(self) -> int:
        """Worker count: 1 when deterministic, else SRH_THREADS, config, CPU count."""
        if self.deterministic:
            return 1
        env = os.environ.get("SRH_THREADS")
        if env:
            return max(1, int(env))
        if self.threads:
            return max(1, self.threads)
        return max(1, os.cpu_count() or 1)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def write_resolved(self, directory: str | Path) -> Path:
        """Dump the fully resolved config; ``load_config`` on it reproduces the run."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_CONFIG_NAME
        path.write_text(self.to_json())
        return path


def _as_bool(v: str) -> bool:
    return v.lower() in ("true", "1", "yes")


# ENV_VAR_NAME: (section or "" for top level, field, cast)
_ENV_OVERRIDES: dict[str, tuple[str, str, Any]] = {
    "SRH_THREADS": ("", "threads", int),
    "SRH_SEED": ("", "seed", int),
    "SRH_OUT_DIR": ("", "out_dir", str),
    "SRH_DETERMINISTIC": ("", "deterministic", _as_bool),
    "SRH_LOG_LEVEL": ("observability", "log_level", str),
    "SRH_OBJECTIVE": ("train", "objective", str),
}


def _apply_env_overrides(raw: dict[str, Any]) -> None:
    """Apply environment variable overrides to the raw config dict."""
    for env_var, (section, field_name, cast) in _ENV_OVERRIDES.items():
        val = os.environ.get(env_var)
        if val is None:
            continue
        if section:
            raw.setdefault(section, {})
            raw[section][field_name] = cast(val)
        else:
            raw[field_name] = cast(val)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load config from a JSON/YAML file with env var overrides, else defaults."""
    if path is None:
        path = _PROJECT_ROOT / "config.yaml"
    path = Path(path)
    if path.exists():
        with open(path) as f:
            raw: dict[str, Any] = yaml.safe_load(f) or {}
    else:
        raw = {}
    _apply_env_overrides(raw)
    return RunConfig(**raw)
