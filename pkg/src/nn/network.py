"""The SRH feature extractor: conv blocks -> pooled feature -> projection.

  [Conv3x3(stride) -> ReLU] x len(conv_channels)
  GlobalAvgPool                       (1x1 spatial map)
  Dense -> features, dimension D
  Dense -> l2-normalize -> projections, dimension d (the unit hypersphere)

Single precision for training; ``astype(np.float64)`` gives the double
precision copy used by gradient checks.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from src.config import ModelConfig
from src.errors import ShapeError, StateError
from src.nn.functional import l2_normalize, l2_normalize_backward
from src.nn.layers import Conv2d, Dense, GlobalAvgPool, Layer, ReLU
from src.parallel import chunked


class FeatureExtractor:
    def __init__(
        self,
        cfg: ModelConfig,
        input_side: int,
        dtype: Any = np.float32,
    ) -> None:
        self.cfg = cfg
        self.input_side = input_side
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.init_seed)

        self.trunk: list[Layer] = []
        in_ch, side = 3, input_side
        for i, out_ch in enumerate(cfg.conv_channels):
            conv = Conv2d(in_ch, out_ch, cfg.conv_stride, rng, name=f"conv{i}", dtype=dtype)
            self.trunk += [conv, ReLU(name=f"relu{i}")]
            side = conv.output_side(side)
            in_ch = out_ch
        self.trunk.append(GlobalAvgPool())
        self.feature = Dense(in_ch, cfg.feature_dim, rng, name="feature", dtype=dtype)
        self.projection = Dense(
            cfg.feature_dim, cfg.projection_dim, rng, name="projection", dtype=dtype
        )
        self._proj_cache: Optional[tuple[np.ndarray, np.ndarray]] = None

    # ── parameters ───────────────────────────────────────────────────

    def _param_layers(self) -> list[Layer]:
        return [layer for layer in (*self.trunk, self.feature, self.projection) if layer.params]

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``layer.param`` in declaration order."""
        return {
            f"{layer.name}.{k}": v
            for layer in self._param_layers()
            for k, v in layer.params.items()
        }

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {
            f"{layer.name}.{k}": layer.grads[k]
            for layer in self._param_layers()
            for k in layer.params
        }

    def set_param(self, name: str, value: np.ndarray) -> None:
        layer_name, key = name.rsplit(".", 1)
        for layer in self._param_layers():
            if layer.name == layer_name:
                if layer.params[key].shape != value.shape:
                    raise ShapeError(
                        f"{name}: shape {value.shape} != {layer.params[key].shape}"
                    )
                layer.params[key] = value.astype(self.dtype)
                return
        raise KeyError(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = list(self.params)
        if list(state) != expected:
            raise ShapeError(f"parameter names differ: {list(state)} vs {expected}")
        for k, v in state.items():
            self.set_param(k, np.asarray(v))

    def astype(self, dtype: Any) -> FeatureExtractor:
        """Copy of this network with parameters cast to ``dtype``."""
        other = FeatureExtractor(self.cfg, self.input_side, dtype)
        other.load_state_dict(self.state_dict())
        return other

    def copy(self) -> FeatureExtractor:
        return self.astype(self.dtype)

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # ── forward / backward ───────────────────────────────────────────

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        s = self.input_side
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected batch of shape (N, 3, {s}, {s}), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(
        self,
        x: np.ndarray,
        project: bool = True,
        cache: bool = True,
    ) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """(features N x D, unit-norm projections N x d or None)."""
        h = self._check_input(x)
        for layer in self.trunk:
            h = layer.forward(h, cache=cache)
        features = self.feature.forward(h, cache=cache)
        if not project:
            if cache:
                self._proj_cache = None
            return features, None
        u = self.projection.forward(features, cache=cache)
        z = l2_normalize(u)
        if cache:
            self._proj_cache = (u, z)
        return features, z

    def backward(
        self,
        d_features: Optional[np.ndarray] = None,
        d_projections: Optional[np.ndarray] = None,
    ) -> dict[str, np.ndarray]:
        """Parameter gradients for upstream gradients on features and/or projections."""
        if d_features is None and d_projections is None:
            raise StateError("backward needs at least one upstream gradient")
        for layer in self._param_layers():
            layer.zero_grad()

        df: Optional[np.ndarray] = None
        if d_projections is not None:
            if self._proj_cache is None:
                raise StateError("backward through projection without a projected forward")
            u, z = self._proj_cache
            du = l2_normalize_backward(u, z, d_projections.astype(self.dtype, copy=False))
            df = self.projection.backward(du)
        if d_features is not None:
            d_features = d_features.astype(self.dtype, copy=False)
            df = d_features if df is None else df + d_features

        dh = self.feature.backward(df)  # type: ignore[arg-type]
        for layer in reversed(self.trunk):
            dh = layer.backward(dh)
        return {k: v.copy() for k, v in self.grads.items()}

    def clear_cache(self) -> None:
        for layer in (*self.trunk, self.feature, self.projection):
            layer.clear_cache()
        self._proj_cache = None

    def embed(
        self,
        x: np.ndarray,
        use_projection: bool = False,
        batch_size: int = 256,
    ) -> np.ndarray:
        """Cache-free inference; safe to call from several threads at once."""
        outs = []
        for sl in chunked(len(x), batch_size):
            features, z = self.forward(x[sl], project=use_projection, cache=False)
            outs.append(z if use_projection else features)
        if not outs:
            dim = self.cfg.projection_dim if use_projection else self.cfg.feature_dim
            return np.zeros((0, dim), dtype=self.dtype)
        return np.concatenate(outs, axis=0)
