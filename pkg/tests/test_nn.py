"""Tests for the numpy network: primitives, layers, the extractor and grad checks."""

from __future__ import annotations

import numpy as np
import pytest

from src.config import ModelConfig
from src.errors import ContractError, DegenerateNormError, ShapeError, StateError
from src.nn.functional import (
    cosine_sim,
    l2_normalize,
    l2_normalize_backward,
    log_softmax,
    relu,
    softmax,
)
from src.nn.grad_check import check_array_gradient, grad_check, relative_error
from src.nn.layers import Conv2d, Dense, GlobalAvgPool, ReLU
from src.nn.network import FeatureExtractor
from src.objectives.contrastive import simclr_loss, supcon_loss
from src.objectives.cross_entropy import softmax_cross_entropy


# ─── helpers ────────────────────────────────────────────────────────────

def _model(dtype=np.float64, **overrides) -> FeatureExtractor:
    defaults = dict(conv_channels=[2, 3], feature_dim=6, projection_dim=3, init_seed=0)
    defaults.update(overrides)
    return FeatureExtractor(ModelConfig(**defaults), 8, dtype)


def _batch(n: int = 4, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(n, 3, 8, 8))


def _linear_loss(seed: int = 7):
    rng = np.random.default_rng(seed)
    r1 = rng.normal(size=(4, 6))
    r2 = rng.normal(size=(4, 3))

    def loss(features, z):
        return float(np.sum(features * r1) + np.sum(z * r2)), r1, r2

    return loss


# ─── functional ─────────────────────────────────────────────────────────

class TestFunctional:
    def test_l2_normalize_345(self) -> None:
        assert l2_normalize(np.array([3.0, 4.0])) == pytest.approx([0.6, 0.8])

    def test_l2_normalize_unit_identity(self) -> None:
        v = np.array([0.0, 1.0, 0.0])
        assert l2_normalize(v) == pytest.approx(v)

    def test_l2_normalize_zero_raises(self) -> None:
        with pytest.raises(DegenerateNormError):
            l2_normalize(np.array([0.0, 0.0]))

    def test_l2_normalize_rows(self) -> None:
        out = l2_normalize(np.random.default_rng(0).normal(size=(5, 4)))
        assert np.linalg.norm(out, axis=1) == pytest.approx(np.ones(5), abs=1e-12)

    def test_normalize_backward_matches_finite_differences(self) -> None:
        rng = np.random.default_rng(3)
        u = rng.normal(size=(3, 4))
        r = rng.normal(size=(3, 4))
        z = l2_normalize(u)
        du = l2_normalize_backward(u, z, r)
        err = check_array_gradient(lambda x: float(np.sum(l2_normalize(x) * r)), u, du)
        assert err < 1e-6

    def test_cosine_sim_cases(self) -> None:
        a = np.array([0.6, 0.8])
        b = np.array([0.8, 0.6])
        assert cosine_sim(a, a) == pytest.approx(1.0)
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
        assert cosine_sim(a, b) == pytest.approx(0.96)
        assert cosine_sim(a, b) == pytest.approx(cosine_sim(b, a), abs=1e-12)

    def test_softmax_rows_sum_to_one(self) -> None:
        p = softmax(np.random.default_rng(1).normal(size=(4, 8)) * 10)
        assert p.sum(axis=1) == pytest.approx(np.ones(4), abs=1e-12)
        assert np.all(p >= 0)

    def test_log_softmax_consistent(self) -> None:
        logits = np.array([[1.0, 2.0, 3.0]])
        assert np.exp(log_softmax(logits)) == pytest.approx(softmax(logits))

    def test_relu(self) -> None:
        assert relu(np.array([-1.0, 0.0, 2.0])) == pytest.approx([0.0, 0.0, 2.0])

    def test_relative_error_floor(self) -> None:
        assert float(relative_error(0.0, 0.0)) == 0.0
        assert float(relative_error(1.0, 1.1)) == pytest.approx(0.1 / 1.1)


# ─── layers ─────────────────────────────────────────────────────────────

class TestLayers:
    def test_conv_output_side(self) -> None:
        conv = Conv2d(3, 2, 2, np.random.default_rng(0), dtype=np.float64)
        out = conv.forward(_batch(2))
        assert out.shape == (2, 2, 4, 4)
        assert conv.output_side(8) == 4
        assert conv.output_side(7) == 4

    def test_conv_stride_one_keeps_side(self) -> None:
        conv = Conv2d(3, 5, 1, np.random.default_rng(0), dtype=np.float64)
        assert conv.forward(_batch(1)).shape == (1, 5, 8, 8)

    def test_conv_rejects_wrong_channels(self) -> None:
        conv = Conv2d(2, 2, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            conv.forward(_batch(1))

    def test_backward_before_forward(self) -> None:
        for layer in (
            Conv2d(3, 2, 2, np.random.default_rng(0)),
            ReLU(),
            GlobalAvgPool(),
            Dense(4, 2, np.random.default_rng(0)),
        ):
            with pytest.raises(StateError):
                layer.backward(np.zeros((1, 2)))

    def test_uncached_forward_leaves_no_state(self) -> None:
        dense = Dense(4, 2, np.random.default_rng(0), dtype=np.float64)
        dense.forward(np.ones((1, 4)), cache=False)
        with pytest.raises(StateError):
            dense.backward(np.ones((1, 2)))

    def test_dense_quadratic_gradient_closed_form(self) -> None:
        rng = np.random.default_rng(2)
        dense = Dense(3, 2, rng, dtype=np.float64)
        x = rng.normal(size=(1, 3))
        y = rng.normal(size=(1, 2))
        out = dense.forward(x)
        dense.backward(2.0 * (out - y))
        W = dense.params["W"]
        expected = 2.0 * (x @ W - y).T @ x     # (out, in); W is stored (in, out)
        assert dense.grads["W"] == pytest.approx(expected.T)
        assert dense.grads["b"] == pytest.approx(2.0 * (x @ W - y).ravel())

    def test_dense_zero_init_without_rng(self) -> None:
        dense = Dense(4, 3, None)
        assert not dense.params["W"].any()

    def test_global_avg_pool(self) -> None:
        pool = GlobalAvgPool()
        x = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2)
        assert pool.forward(x) == pytest.approx(x.mean(axis=(2, 3)))
        dx = pool.backward(np.ones((2, 3)))
        assert dx == pytest.approx(np.full((2, 3, 2, 2), 0.25))

    def test_relu_backward_masks(self) -> None:
        r = ReLU()
        r.forward(np.array([[-1.0, 2.0]]))
        assert r.backward(np.array([[5.0, 5.0]])) == pytest.approx([[0.0, 5.0]])


# ─── feature extractor ──────────────────────────────────────────────────

class TestFeatureExtractor:
    def test_output_shapes_and_unit_projections(self) -> None:
        model = _model(np.float32)
        features, z = model.forward(_batch(5).astype(np.float32))
        assert features.shape == (5, 6)
        assert z.shape == (5, 3)
        assert np.linalg.norm(z, axis=1) == pytest.approx(np.ones(5), abs=1e-6)

    def test_forward_without_projection(self) -> None:
        features, z = _model().forward(_batch(2), project=False)
        assert z is None
        assert features.shape == (2, 6)

    def test_forward_is_deterministic(self) -> None:
        model = _model()
        x = _batch(3)
        a = model.forward(x, cache=False)
        b = model.forward(x, cache=False)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_duplicated_rows_give_identical_outputs(self) -> None:
        x = np.repeat(_batch(1), 3, axis=0)
        features, z = _model().forward(x)
        assert np.array_equal(features[0], features[2])
        assert np.array_equal(z[0], z[1])

    def test_zero_network_hits_degenerate_norm(self) -> None:
        model = _model()
        model.load_state_dict({k: np.zeros_like(v) for k, v in model.params.items()})
        with pytest.raises(DegenerateNormError):
            model.forward(np.zeros((2, 3, 8, 8)))
        features, _ = model.forward(np.zeros((2, 3, 8, 8)), project=False)
        assert not features.any()

    def test_rejects_wrong_input_side(self) -> None:
        with pytest.raises(ShapeError):
            _model().forward(np.zeros((1, 3, 16, 16)))

    def test_same_init_seed_same_params(self) -> None:
        a, b = _model(), _model()
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        c = _model(init_seed=1)
        assert not np.array_equal(a.params["conv0.W"], c.params["conv0.W"])

    def test_param_names_in_declaration_order(self) -> None:
        assert list(_model().params) == [
            "conv0.W", "conv0.b", "conv1.W", "conv1.b",
            "feature.W", "feature.b", "projection.W", "projection.b",
        ]

    def test_state_dict_round_trip(self) -> None:
        src = _model(init_seed=3)
        dst = _model(init_seed=4)
        dst.load_state_dict(src.state_dict())
        x = _batch(2)
        assert np.array_equal(src.forward(x)[1], dst.forward(x)[1])

    def test_load_state_dict_rejects_bad_shape(self) -> None:
        model = _model()
        state = model.state_dict()
        state["feature.W"] = np.zeros((2, 2))
        with pytest.raises(ShapeError):
            model.load_state_dict(state)

    def test_astype_copies(self) -> None:
        model = _model(np.float32)
        double = model.astype(np.float64)
        assert double.dtype == np.float64
        assert double.params["conv0.W"].dtype == np.float64
        double.params["conv0.W"][...] = 0
        assert model.params["conv0.W"].any()

    def test_embed_matches_forward(self) -> None:
        model = _model()
        x = _batch(7)
        features, z = model.forward(x, cache=False)
        assert model.embed(x, batch_size=3) == pytest.approx(features)
        assert model.embed(x, use_projection=True, batch_size=2) == pytest.approx(z)

    def test_embed_empty(self) -> None:
        assert _model().embed(np.zeros((0, 3, 8, 8))).shape == (0, 6)

    def test_backward_needs_upstream(self) -> None:
        model = _model()
        model.forward(_batch(2))
        with pytest.raises(StateError):
            model.backward()

    def test_backward_through_projection_needs_projected_forward(self) -> None:
        model = _model()
        model.forward(_batch(2), project=False)
        with pytest.raises(StateError):
            model.backward(d_projections=np.ones((2, 3)))

    def test_zero_upstream_gives_zero_grads(self) -> None:
        model = _model()
        model.forward(_batch(2))
        grads = model.backward(np.zeros((2, 6)), np.zeros((2, 3)))
        assert all(not g.any() for g in grads.values())


# ─── grad check ─────────────────────────────────────────────────────────

class TestGradCheck:
    def test_linear_loss_through_whole_network(self) -> None:
        report = grad_check(_model(), _batch(), _linear_loss())
        assert report.passed, report.per_param
        assert report.max_rel_error < 1e-4
        assert set(report.per_param) == set(_model().params)

    def test_supcon_loss_through_projection(self) -> None:
        def loss(features, z):
            value, dz = supcon_loss(z, [0, 0, 1, 1], 0.5)
            return value, None, dz

        report = grad_check(_model(), _batch(), loss)
        assert report.passed, report.per_param

    def test_simclr_loss_through_projection(self) -> None:
        def loss(features, z):
            value, dz = simclr_loss(z, 0.5)
            return value, None, dz

        report = grad_check(_model(), _batch(seed=5), loss)
        assert report.passed, report.per_param

    def test_cross_entropy_through_fixed_head(self) -> None:
        rng = np.random.default_rng(11)
        w = rng.normal(size=(6, 8))
        labels = [0, 3, 5, 7]

        def loss(features, z):
            value, d_logits = softmax_cross_entropy(features @ w, labels)
            return value, d_logits @ w.T, None

        report = grad_check(_model(), _batch(), loss, project=False)
        assert report.passed, report.per_param

    def test_zero_loss_reports_zero(self) -> None:
        report = grad_check(_model(), _batch(), lambda f, z: (0.0, None, None))
        assert report.max_rel_error == 0.0
        assert report.passed

    def test_corrupted_conv_gradient_is_detected(self) -> None:
        model = _model()
        x = _batch()
        loss = _linear_loss()
        features, z = model.forward(x)
        _, r1, r2 = loss(features, z)
        true = model.backward(r1, r2)
        model.clear_cache()

        report = grad_check(model, x, loss,
                            analytic_override={"conv0.W": true["conv0.W"] * 1.1})
        assert not report.passed
        assert report.per_param["conv0.W"] > 1e-2
        assert report.worst_param == "conv0.W"

    def test_float32_model_rejected(self) -> None:
        with pytest.raises(ContractError):
            grad_check(_model(np.float32), _batch(), _linear_loss())

    def test_samples_cover_small_params_fully(self) -> None:
        report = grad_check(_model(), _batch(), _linear_loss(), samples_per_param=200)
        assert report.coordinates == _model().num_parameters
