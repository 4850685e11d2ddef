"""Versioned binary checkpoints.

Layout (little-endian):
  magic  b"SRHCKPT1"
  u32    JSON blob length
  bytes  JSON blob (sorted keys, compact separators): model config, input
         side, channel statistics, run config snapshot, metrics history,
         training provenance and the ordered array table [{name, shape}]
  f32[]  parameter arrays in declaration order, extractor then probe

Encoding is deterministic, so save -> load -> save reproduces the bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.config import ModelConfig
from src.errors import CheckpointError
from src.nn.network import FeatureExtractor
from src.preprocess.normalization import ChannelStats

MAGIC = b"SRHCKPT1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: dict[str, Any]
    input_side: int
    extractor: dict[str, np.ndarray]
    stats: ChannelStats
    probe: Optional[dict[str, np.ndarray]] = None
    objective: str = ""
    config: dict[str, Any] = field(default_factory=dict)
    history: list[dict[str, Any]] = field(default_factory=list)
    train_patients: list[str] = field(default_factory=list)
    train_slides: list[str] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: FeatureExtractor, stats: ChannelStats, **kwargs: Any) -> Checkpoint:
        return cls(
            model_config=model.cfg.model_dump(mode="json"),
            input_side=model.input_side,
            extractor={k: v.astype(np.float32) for k, v in model.state_dict().items()},
            stats=stats,
            **kwargs,
        )

    @property
    def has_probe(self) -> bool:
        return self.probe is not None

    def build_extractor(self, dtype: Any = np.float32) -> FeatureExtractor:
        model = FeatureExtractor(ModelConfig(**self.model_config), self.input_side, dtype)
        model.load_state_dict(self.extractor)
        return model

    def with_probe(
        self,
        probe: dict[str, np.ndarray],
        history: Optional[list[dict[str, Any]]] = None,
    ) -> Checkpoint:
        return replace(
            self,
            probe={k: v.astype(np.float32) for k, v in probe.items()},
            history=list(self.history) + list(history or []),
        )

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"extractor/{k}", v) for k, v in self.extractor.items()]
        if self.probe is not None:
            items += [(f"probe/{k}", v) for k, v in self.probe.items()]
        return items

    def _meta(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.model_config,
            "input_side": self.input_side,
            "stats": self.stats.to_dict(),
            "objective": self.objective,
            "config": self.config,
            "history": self.history,
            "train_patients": list(self.train_patients),
            "train_slides": list(self.train_slides),
            "arrays": [
                {"name": name, "shape": list(arr.shape)} for name, arr in self._arrays()
            ],
        }

    def to_bytes(self) -> bytes:
        blob = json.dumps(self._meta(), sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, _LEN.pack(len(blob)), blob]
        for _, arr in self._arrays():
            parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        head = len(MAGIC) + _LEN.size
        if len(data) < head or data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not an SRHCKPT1 checkpoint")
        (blob_len,) = _LEN.unpack_from(data, len(MAGIC))
        if len(data) < head + blob_len:
            raise CheckpointError("checkpoint truncated inside its config blob")
        try:
            meta = json.loads(data[head:head + blob_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint config blob is not JSON: {e}") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")

        pos = head + blob_len
        extractor: dict[str, np.ndarray] = {}
        probe: dict[str, np.ndarray] = {}
        for spec in meta["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * _F32.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"checkpoint truncated in array {spec['name']}")
            arr = np.frombuffer(data, dtype=_F32, count=count, offset=pos).reshape(shape)
            pos += nbytes
            group, name = spec["name"].split("/", 1)
            (extractor if group == "extractor" else probe)[name] = arr.astype(np.float32)
        if pos != len(data):
            raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint arrays")

        return cls(
            model_config=meta["model_config"],
            input_side=int(meta["input_side"]),
            extractor=extractor,
            stats=ChannelStats.from_dict(meta["stats"]),
            probe=probe or None,
            objective=meta["objective"],
            config=meta["config"],
            history=meta["history"],
            train_patients=meta["train_patients"],
            train_slides=meta["train_slides"],
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    return ckpt.save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)
