"""Tests for optimizers, samplers, checkpoints, extractor training and the linear probe."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.config import ModelConfig, ProbeConfig
from src.errors import CheckpointError, ContractError, SamplerError, ShapeError
from src.nn.network import FeatureExtractor
from src.preprocess.dataset import PatchDataset
from src.preprocess.normalization import ChannelStats
from src.trainer.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from src.trainer.extractor import clip_gradients, step_losses, train_extractor
from src.trainer.optimizers import SGD, Adam, adam_step, sgd_step
from src.trainer.probe import LinearProbe, checkpoint_features, fit_probe, train_linear_probe
from src.trainer.sampler import class_balanced_batches, shuffled_batches
from tests.conftest import tiny_config, toy_dataset


# ─── helpers ────────────────────────────────────────────────────────────

def _ckpt(with_probe: bool = False, **overrides) -> Checkpoint:
    model = FeatureExtractor(
        ModelConfig(conv_channels=[2, 3], feature_dim=6, projection_dim=3), 8
    )
    defaults = dict(
        objective="supcon",
        config={"train": {"objective": "supcon"}},
        history=[{"phase": "extractor", "epoch": 0, "loss": 1.25}],
        train_patients=["P1", "P2"],
        train_slides=["P1-S0"],
    )
    defaults.update(overrides)
    if with_probe:
        rng = np.random.default_rng(0)
        defaults["probe"] = {"W": rng.normal(size=(6, 8)).astype(np.float32),
                             "b": rng.normal(size=8).astype(np.float32)}
    stats = ChannelStats(mean=(0.1, 0.2, 0.3), std=(0.5, 0.25, 0.125))
    return Checkpoint.from_model(model, stats, **defaults)


def _train_cfg(tmp_path: Path, **train):
    defaults = dict(objective="ce", batch_size=8, epochs=1, lr=0.01)
    defaults.update(train)
    return tiny_config(tmp_path / "run", train=defaults)


# ─── optimizers ─────────────────────────────────────────────────────────

class TestSgd:
    def test_single_step_no_momentum(self) -> None:
        theta, _ = sgd_step(np.array([1.0]), np.array([0.5]), lr=0.1, momentum=0.0)
        assert theta == pytest.approx([0.95])

    def test_two_momentum_steps(self) -> None:
        theta, v = sgd_step(np.array([0.0]), np.array([1.0]), 0.1, 0.9)
        assert theta == pytest.approx([-0.1])
        theta, v = sgd_step(theta, np.array([1.0]), 0.1, 0.9, v)
        assert v == pytest.approx([1.9])
        assert theta == pytest.approx([-0.29])

    def test_zero_gradient_keeps_params(self) -> None:
        p = np.array([1.0, -2.0])
        theta, v = sgd_step(p, np.zeros(2), 0.1, 0.9)
        assert np.array_equal(theta, p)
        assert not v.any()

    def test_pure(self) -> None:
        p, g, v = np.array([1.0]), np.array([2.0]), np.array([0.5])
        a = sgd_step(p, g, 0.1, 0.9, v)
        b = sgd_step(p, g, 0.1, 0.9, v)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert p[0] == 1.0 and v[0] == 0.5

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            sgd_step(np.zeros(3), np.zeros(2), 0.1, 0.0)

    def test_lr_zero_never_moves(self) -> None:
        opt = SGD(lr=0.0, momentum=0.9)
        params = {"w": np.array([1.0, 2.0])}
        for _ in range(5):
            params = opt.step(params, {"w": np.array([3.0, -1.0])})
        assert np.array_equal(params["w"], [1.0, 2.0])


class TestAdam:
    def test_first_step_moves_by_lr(self) -> None:
        g = np.array([0.3, -7.0, 1e-3])
        theta, _, _ = adam_step(np.zeros(3), g, 0.01, 0.9, 0.999, 0.0, None, None, 1)
        assert np.abs(theta) == pytest.approx(np.full(3, 0.01))
        assert np.sign(theta) == pytest.approx(-np.sign(g))

    def test_constant_gradient_hand_iteration(self) -> None:
        # m_hat = g and v_hat = g^2 at every step for a constant gradient
        g = np.array([0.5, -2.0])
        theta, m, v = adam_step(np.zeros(2), g, 0.1, 0.9, 0.999, 1e-8, None, None, 1)
        theta, m, v = adam_step(theta, g, 0.1, 0.9, 0.999, 1e-8, m, v, 2)
        assert m == pytest.approx([0.095, -0.38])
        assert v == pytest.approx([0.25 * 0.001999, 4.0 * 0.001999])
        assert theta == pytest.approx([-0.2, 0.2], abs=1e-6)

    def test_zero_gradient_keeps_params(self) -> None:
        opt = Adam(lr=0.1)
        params = {"w": np.array([0.5])}
        for _ in range(3):
            params = opt.step(params, {"w": np.zeros(1)})
        assert params["w"] == pytest.approx([0.5])
        assert opt.t == 3

    def test_step_count_must_be_positive(self) -> None:
        with pytest.raises(ContractError):
            adam_step(np.zeros(1), np.ones(1), 0.1, 0.9, 0.999, 1e-8, None, None, 0)

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            adam_step(np.zeros(2), np.ones(3), 0.1, 0.9, 0.999, 1e-8, None, None, 1)


class TestClipGradients:
    def test_scales_to_max_norm(self) -> None:
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert grads["a"] == pytest.approx([0.6])
        assert grads["b"] == pytest.approx([0.8])

    def test_none_or_small_leaves_grads(self) -> None:
        grads = {"a": np.array([3.0, 4.0])}
        clip_gradients(grads, None)
        clip_gradients(grads, 10.0)
        assert grads["a"] == pytest.approx([3.0, 4.0])


# ─── samplers ───────────────────────────────────────────────────────────

class TestSamplers:
    def test_shuffled_batches_cover_once(self) -> None:
        batches = shuffled_batches(10, 4, np.random.default_rng(0), min_size=1)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_shuffled_batches_drop_short_tail(self) -> None:
        batches = shuffled_batches(9, 4, np.random.default_rng(0), min_size=2)
        assert [len(b) for b in batches] == [4, 4]

    def test_balanced_batches_pair_every_class(self) -> None:
        labels = np.array([0] * 7 + [1] * 3 + [2] * 5 + [3] * 2)
        batches = class_balanced_batches(labels, 6, np.random.default_rng(1))
        assert len(batches) == 3
        for b in batches:
            assert len(b) == 6
            _, counts = np.unique(labels[b], return_counts=True)
            assert counts.min() >= 2

    def test_balanced_batches_hold_every_class_when_room(self) -> None:
        labels = np.repeat(np.arange(4), 5)
        for b in class_balanced_batches(labels, 8, np.random.default_rng(2)):
            assert set(labels[b].tolist()) == {0, 1, 2, 3}

    def test_balanced_batches_reject_singleton_class(self) -> None:
        with pytest.raises(SamplerError):
            class_balanced_batches(np.array([0, 0, 1]), 4, np.random.default_rng(0))

    def test_balanced_batches_reject_tiny_batch(self) -> None:
        with pytest.raises(SamplerError):
            class_balanced_batches(np.array([0, 0, 1, 1]), 1, np.random.default_rng(0))

    def test_balanced_batches_empty(self) -> None:
        with pytest.raises(ContractError):
            class_balanced_batches(np.array([], dtype=np.int64), 4, np.random.default_rng(0))


# ─── checkpoint ─────────────────────────────────────────────────────────

class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path: Path) -> None:
        ckpt = _ckpt(with_probe=True)
        first = save_checkpoint(ckpt, tmp_path / "a.ckpt").read_bytes()
        reloaded = load_checkpoint(tmp_path / "a.ckpt")
        second = save_checkpoint(reloaded, tmp_path / "b.ckpt").read_bytes()
        assert first == second
        assert first.startswith(MAGIC)

    def test_round_trip_fields(self) -> None:
        ckpt = _ckpt(with_probe=True)
        back = Checkpoint.from_bytes(ckpt.to_bytes())
        assert back.objective == "supcon"
        assert back.stats == ckpt.stats
        assert back.train_patients == ["P1", "P2"]
        assert back.history == ckpt.history
        assert back.has_probe
        for k, v in ckpt.extractor.items():
            assert np.array_equal(back.extractor[k], v)
        assert np.array_equal(back.probe["W"], ckpt.probe["W"])

    def test_no_probe_round_trip(self) -> None:
        back = Checkpoint.from_bytes(_ckpt().to_bytes())
        assert back.probe is None

    def test_build_extractor_reproduces_outputs(self) -> None:
        ckpt = _ckpt()
        model = ckpt.build_extractor()
        x = np.random.default_rng(0).uniform(size=(2, 3, 8, 8)).astype(np.float32)
        again = Checkpoint.from_bytes(ckpt.to_bytes()).build_extractor()
        assert np.array_equal(model.embed(x), again.embed(x))

    def test_bad_magic(self) -> None:
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"NOTACKPT" + bytes(16))

    def test_truncated_arrays(self) -> None:
        data = _ckpt().to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(data[:-4])

    def test_trailing_bytes(self) -> None:
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(_ckpt().to_bytes() + b"\x00\x00\x00\x00")

    def test_truncated_blob(self) -> None:
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(_ckpt().to_bytes()[:20])

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_with_probe_appends_history(self) -> None:
        ckpt = _ckpt()
        probe = {"W": np.zeros((6, 8)), "b": np.zeros(8)}
        out = ckpt.with_probe(probe, [{"phase": "probe", "epoch": 0, "loss": 2.0}])
        assert out.probe["W"].dtype == np.float32
        assert len(out.history) == 2
        assert ckpt.probe is None


# ─── extractor training ─────────────────────────────────────────────────

class TestTrainExtractor:
    def test_zero_epochs_returns_initialization(self, tmp_path: Path) -> None:
        cfg = _train_cfg(tmp_path, epochs=0)
        ckpt = train_extractor(toy_dataset(), cfg)
        init = FeatureExtractor(cfg.model, 8).state_dict()
        for k, v in init.items():
            assert np.array_equal(ckpt.extractor[k], v)
        assert step_losses(ckpt) == []

    def test_deterministic_for_fixed_seed(self, tmp_path: Path) -> None:
        cfg = _train_cfg(tmp_path, objective="simclr", epochs=2, batch_size=4)
        a = train_extractor(toy_dataset(), cfg)
        b = train_extractor(toy_dataset(), cfg)
        c = train_extractor(toy_dataset(), cfg, threads=2)
        for k in a.extractor:
            assert np.array_equal(a.extractor[k], b.extractor[k])
            assert np.array_equal(a.extractor[k], c.extractor[k])
        assert step_losses(a) == step_losses(b)

    def test_parameters_move(self, tmp_path: Path) -> None:
        cfg = _train_cfg(tmp_path, epochs=2)
        ckpt = train_extractor(toy_dataset(), cfg)
        init = FeatureExtractor(cfg.model, 8).state_dict()
        assert not np.array_equal(ckpt.extractor["feature.W"], init["feature.W"])

    def test_ce_checkpoint_carries_head(self, tmp_path: Path) -> None:
        ckpt = train_extractor(toy_dataset(), _train_cfg(tmp_path))
        assert ckpt.has_probe
        assert ckpt.probe["W"].shape == (6, 8)
        assert ckpt.objective == "ce"

    def test_supcon_without_head(self, tmp_path: Path) -> None:
        ckpt = train_extractor(toy_dataset(), _train_cfg(tmp_path, objective="supcon"))
        assert ckpt.probe is None
        assert all(np.isfinite(step_losses(ckpt)))

    def test_provenance_recorded(self, tmp_path: Path) -> None:
        ds = toy_dataset()
        ckpt = train_extractor(ds, _train_cfg(tmp_path))
        assert ckpt.train_patients == sorted(set(ds.patient_ids.tolist()))
        assert ckpt.config["train"]["objective"] == "ce"
        assert ckpt.input_side == 8

    def test_empty_dataset(self, tmp_path: Path) -> None:
        with pytest.raises(ContractError):
            train_extractor(PatchDataset.empty(8), _train_cfg(tmp_path))

    def test_single_class_rejected_for_supervised(self, tmp_path: Path) -> None:
        with pytest.raises(ContractError):
            train_extractor(toy_dataset(classes=(3,)), _train_cfg(tmp_path))

    @pytest.mark.slow
    def test_ce_loss_goes_down(self, tmp_path: Path) -> None:
        cfg = _train_cfg(tmp_path, epochs=20, lr=0.05)
        losses = step_losses(train_extractor(toy_dataset(per_class=10, classes=(0, 1, 2, 3)), cfg))
        tenth = max(1, len(losses) // 10)
        assert np.mean(losses[-tenth:]) < np.mean(losses[:tenth])

    @pytest.mark.slow
    def test_supcon_separates_held_out_classes(self, tmp_path: Path) -> None:
        cfg = tiny_config(
            tmp_path / "run",
            train=dict(objective="supcon", batch_size=16, epochs=15, lr=0.05, temperature=0.1),
        )
        ckpt = train_extractor(toy_dataset(per_class=16), cfg)
        held = toy_dataset(per_class=8, seed=99)
        z = checkpoint_features(ckpt, held.pixels, use_projection=True).astype(np.float64)
        sims = z @ z.T
        same = held.labels[:, None] == held.labels[None, :]
        off_diag = ~np.eye(len(z), dtype=bool)
        assert sims[same & off_diag].mean() > sims[~same].mean()


# ─── linear probe ───────────────────────────────────────────────────────

class TestLinearProbe:
    def test_separable_features_fit(self) -> None:
        rng = np.random.default_rng(0)
        angles = np.arange(8) * (2 * np.pi / 8)
        centers = 10.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        labels = np.repeat(np.arange(8), 25)
        features = centers[labels] + rng.normal(0.0, 0.3, size=(len(labels), 2))
        probe, history = fit_probe(features, labels,
                                   ProbeConfig(epochs=60, batch_size=32, lr=0.05))
        acc = (probe.predict_proba(features).argmax(axis=1) == labels).mean()
        assert acc >= 0.99
        assert history[-1]["loss"] < history[0]["loss"]

    def test_probabilities_sum_to_one(self) -> None:
        probe = LinearProbe.from_state({
            "W": np.random.default_rng(1).normal(size=(6, 8)).astype(np.float32),
            "b": np.zeros(8, dtype=np.float32),
        })
        p = probe.predict_proba(np.random.default_rng(2).normal(size=(10, 6)))
        assert p.sum(axis=1) == pytest.approx(np.ones(10), abs=1e-6)

    def test_wrong_feature_width(self) -> None:
        with pytest.raises(ShapeError):
            LinearProbe(6).predict_proba(np.zeros((2, 5)))

    def test_fit_requires_samples(self) -> None:
        with pytest.raises(ContractError):
            fit_probe(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), ProbeConfig())

    def test_fit_label_count_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            fit_probe(np.zeros((3, 4)), np.zeros(2, dtype=np.int64), ProbeConfig())

    def test_extractor_stays_frozen(self) -> None:
        ckpt = _ckpt()
        out = train_linear_probe(ckpt, toy_dataset(), ProbeConfig(epochs=3, batch_size=4))
        for k, v in ckpt.extractor.items():
            assert np.array_equal(out.extractor[k], v)
        assert out.probe["W"].shape == (6, 8)
        assert out.history[-1]["phase"] == "probe_summary"

    def test_dataset_side_must_match(self) -> None:
        with pytest.raises(ShapeError):
            train_linear_probe(_ckpt(), toy_dataset(side=4), ProbeConfig(epochs=1))

    def test_empty_dataset(self) -> None:
        with pytest.raises(ContractError):
            train_linear_probe(_ckpt(), PatchDataset.empty(8), ProbeConfig(epochs=1))

    def test_checkpoint_features_thread_invariant(self) -> None:
        ckpt = _ckpt()
        pixels = toy_dataset(per_class=20).pixels
        one = checkpoint_features(ckpt, pixels, threads=1, batch_size=7)
        four = checkpoint_features(ckpt, pixels, threads=4, batch_size=7)
        assert np.array_equal(one, four)
        assert one.shape == (40, 6)
