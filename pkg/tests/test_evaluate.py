"""Tests for aggregation, the metric suite and held-out evaluation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from src.config import ModelConfig
from src.errors import ContractError, LeakageError, StateError
from src.evaluate.aggregation import (
    argmax_index,
    group_indices,
    majority_vote,
    majority_vote_index,
    soft_aggregate,
)
from src.evaluate.inference import Predictor
from src.evaluate.metrics import (
    accuracy,
    confusion_matrix,
    mean_class_accuracy,
    metric_set,
    top_k_accuracy,
    true_label_rank,
)
from src.evaluate.testset import (
    JSON_REPORT_NAME,
    TEXT_REPORT_NAME,
    check_leakage,
    evaluate_predictions,
    evaluate_testset,
    format_table,
    write_eval_report,
)
from src.nn.network import FeatureExtractor
from src.preprocess.dataset import PatchDataset
from src.preprocess.normalization import ChannelStats
from src.srh_io.labels import ALL_CLASSES, ClassLabel
from src.srh_io.manifest import DatasetManifest, ManifestEntry, SplitSpec, split_by_patient
from src.trainer.checkpoint import Checkpoint
from tests.conftest import tiny_config, toy_dataset


# ─── helpers ────────────────────────────────────────────────────────────

def _dist(*weights: float) -> np.ndarray:
    """8-class distribution from leading weights (the rest zero)."""
    p = np.zeros(8)
    p[:len(weights)] = weights
    return p


def _ds(labels, slide_labels, slides, patients, centers=None) -> PatchDataset:
    n = len(labels)
    return PatchDataset(
        pixels=np.zeros((n, 3, 8, 8), dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        slide_labels=np.array(slide_labels, dtype=np.int64),
        slide_ids=np.array(slides),
        patient_ids=np.array(patients),
        centers=np.array(centers if centers is not None else [""] * n),
        offsets=np.zeros((n, 2), dtype=np.int64),
    )


def _ckpt(probe: bool = True, train_patients=("P0-0",)) -> Checkpoint:
    model = FeatureExtractor(ModelConfig(conv_channels=[2, 3], feature_dim=6, projection_dim=3), 8)
    rng = np.random.default_rng(0)
    return Checkpoint.from_model(
        model,
        ChannelStats.identity(),
        probe={"W": rng.normal(size=(6, 8)).astype(np.float32),
               "b": np.zeros(8, dtype=np.float32)} if probe else None,
        objective="ce",
        train_patients=list(train_patients),
    )


# ─── aggregation ────────────────────────────────────────────────────────

class TestSoftAggregate:
    def test_mean_of_two(self) -> None:
        assert soft_aggregate([[0.6, 0.4], [0.2, 0.8]]) == pytest.approx([0.4, 0.6])

    def test_single_is_identity(self) -> None:
        assert soft_aggregate([[0.1, 0.7, 0.2]]) == pytest.approx([0.1, 0.7, 0.2])

    def test_hand_mean(self) -> None:
        assert soft_aggregate([[1, 0], [1, 0], [0, 1]]) == pytest.approx([2 / 3, 1 / 3])

    def test_equals_arithmetic_mean(self) -> None:
        p = np.random.default_rng(0).dirichlet(np.ones(8), size=13)
        out = soft_aggregate(p)
        assert out == pytest.approx(p.mean(axis=0), abs=1e-12)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        assert soft_aggregate(p[::-1]) == pytest.approx(out, abs=1e-12)

    def test_identical_inputs(self) -> None:
        p = _dist(0.25, 0.75)
        assert soft_aggregate([p, p, p]) == pytest.approx(p)

    def test_argmax_unchanged_by_common_scale(self) -> None:
        p = np.random.default_rng(1).dirichlet(np.ones(8), size=5)
        assert argmax_index(soft_aggregate(p * 3.7)) == argmax_index(soft_aggregate(p))

    def test_empty_rejected(self) -> None:
        with pytest.raises(ContractError):
            soft_aggregate([])


class TestMajorityVote:
    def test_majority(self) -> None:
        dists = [_dist(0.9, 0.1), _dist(0.8, 0.2), _dist(0.3, 0.7)]
        assert majority_vote(dists) is ClassLabel.PITUITARY_ADENOMA

    def test_tie_goes_to_lower_index(self) -> None:
        dists = [_dist(0.0, 0.0, 1.0), _dist(0.0, 1.0)]
        assert majority_vote_index(dists) == 1
        assert majority_vote(dists) is ClassLabel.MENINGIOMA

    def test_vote_and_soft_disagree(self) -> None:
        dists = [[0.9, 0.1], [0.4, 0.6], [0.4, 0.6]]
        assert majority_vote_index(dists) == 1
        soft = soft_aggregate(dists)
        assert soft == pytest.approx([0.5667, 0.4333], abs=1e-4)
        assert argmax_index(soft) == 0

    def test_empty_rejected(self) -> None:
        with pytest.raises(ContractError):
            majority_vote([])

    def test_argmax_tie(self) -> None:
        assert argmax_index(np.array([0.2, 0.4, 0.4])) == 1

    def test_group_indices_sorted(self) -> None:
        groups = group_indices(["b", "a", "b", "c"])
        assert list(groups) == ["a", "b", "c"]
        assert groups["b"].tolist() == [0, 2]


# ─── metrics ────────────────────────────────────────────────────────────

class TestMetrics:
    def test_perfect_top_k(self) -> None:
        labels = np.array([0, 3, 7])
        probs = np.eye(8)[labels]
        for k in range(1, 9):
            assert top_k_accuracy(probs, labels, k) == 1.0

    def test_true_label_always_second(self) -> None:
        probs = np.array([_dist(0.6, 0.4), _dist(0.3, 0.7)])
        labels = [1, 0]
        assert top_k_accuracy(probs, labels, 1) == 0.0
        assert top_k_accuracy(probs, labels, 2) == 1.0

    def test_top_k_monotone(self) -> None:
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(8), size=200)
        labels = rng.integers(0, 8, size=200)
        values = [top_k_accuracy(probs, labels, k) for k in range(1, 9)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_rank_ties_favor_lower_index(self) -> None:
        probs = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert true_label_rank(probs, [0, 1]).tolist() == [0, 1]

    def test_k_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            top_k_accuracy(np.eye(8), np.arange(8), 0)
        with pytest.raises(ContractError):
            top_k_accuracy(np.eye(8), np.arange(8), 9)

    def test_confusion_rows_are_class_counts(self) -> None:
        cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
        assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
        assert cm.sum(axis=1).tolist() == [2, 1, 3]
        assert accuracy(cm) == pytest.approx(4 / 6)

    def test_mca_perfect(self) -> None:
        assert mean_class_accuracy(np.diag([3, 5, 2])) == pytest.approx(1.0)

    def test_mca_differs_from_accuracy(self) -> None:
        cm = np.array([[9, 1], [3, 2]])
        assert mean_class_accuracy(cm, ["A", "B"]) == pytest.approx(0.65)
        assert accuracy(cm) == pytest.approx(11 / 15)

    def test_mca_uniform_random_near_chance(self) -> None:
        rng = np.random.default_rng(4)
        true = rng.integers(0, 8, size=10_000)
        pred = rng.integers(0, 8, size=10_000)
        assert mean_class_accuracy(confusion_matrix(true, pred)) == pytest.approx(1 / 8, abs=0.05)

    def test_mca_drops_absent_classes(self) -> None:
        cm = np.zeros((8, 8), dtype=np.int64)
        cm[0, 0] = 4
        cm[1, 0] = 2
        cm[1, 1] = 2
        assert mean_class_accuracy(cm) == pytest.approx((1.0 + 0.5) / 2)

    def test_mca_empty_matrix(self) -> None:
        with pytest.raises(ContractError):
            mean_class_accuracy(np.zeros((8, 8)))

    def test_metric_set(self) -> None:
        probs = np.array([_dist(0.9, 0.1), _dist(0.2, 0.8), _dist(0.6, 0.4)])
        ms, cm = metric_set(probs, [0, 1, 1])
        assert ms.acc == pytest.approx(2 / 3)
        assert ms.top2 == pytest.approx(1.0)
        assert ms.mca == pytest.approx(0.75)
        assert cm.shape == (8, 8)


# ─── test-set evaluation ────────────────────────────────────────────────

class TestEvaluatePredictions:
    def test_perfect_classifier_fills_grid_with_ones(self) -> None:
        ds = _ds(labels=[0, 0, 1, 1], slide_labels=[0, 0, 1, 1],
                 slides=["A", "A", "B", "B"], patients=["P", "P", "Q", "Q"])
        report = evaluate_predictions(np.eye(8)[ds.labels], ds)
        for cell in report.grid().values():
            assert cell == {"acc": 1.0, "top2": 1.0, "mca": 1.0}
        assert list(report.grid()) == ["patch", "slide", "patient"]

    def test_patient_level_pools_patches(self) -> None:
        # slide A leans to class 1, slide B to class 2, the pooled patches to class 0
        probs = np.array([_dist(0.4, 0.6), _dist(0.4, 0.6),
                          _dist(0.4, 0.0, 0.6), _dist(0.4, 0.0, 0.6)])
        ds = _ds(labels=[0, 0, 0, 0], slide_labels=[0, 0, 0, 0],
                 slides=["A", "A", "B", "B"], patients=["P"] * 4)
        report = evaluate_predictions(probs, ds)
        assert report.levels["slide"].metrics.acc == 0.0
        assert report.levels["patient"].metrics.acc == 1.0
        assert report.levels["patient"].n == 1
        assert report.levels["slide"].n == 2

    def test_nondiagnostic_patches_left_out_of_slides(self) -> None:
        nd = ClassLabel.NONDIAGNOSTIC.class_index
        probs = np.array([_dist(0.0, 1.0), np.eye(8)[nd], np.eye(8)[nd]])
        ds = _ds(labels=[1, nd, nd], slide_labels=[1, 1, 1],
                 slides=["A"] * 3, patients=["P"] * 3)
        assert evaluate_predictions(probs, ds).levels["slide"].metrics.acc == 1.0
        kept = evaluate_predictions(probs, ds, exclude_nondiagnostic=False)
        assert kept.levels["slide"].metrics.acc == 0.0

    def test_all_nondiagnostic_slide_falls_back(self) -> None:
        nd = ClassLabel.NONDIAGNOSTIC.class_index
        ds = _ds(labels=[nd, nd], slide_labels=[nd, nd], slides=["A", "A"], patients=["P", "P"])
        report = evaluate_predictions(np.eye(8)[[nd, nd]], ds)
        assert report.levels["slide"].metrics.acc == 1.0

    def test_majority_vote_comparison(self) -> None:
        probs = np.array([[0.9, 0.1] + [0.0] * 6, [0.4, 0.6] + [0.0] * 6,
                          [0.4, 0.6] + [0.0] * 6])
        ds = _ds(labels=[0, 0, 0], slide_labels=[0, 0, 0], slides=["A"] * 3, patients=["P"] * 3)
        report = evaluate_predictions(probs, ds)
        assert report.levels["slide"].metrics.acc == 1.0
        assert report.majority_vote["slide"] == 0.0
        assert report.to_dict()["aggregation_comparison"]["slide"] == {
            "soft": 1.0, "majority_vote": 0.0,
        }

    def test_per_center_breakdown(self) -> None:
        ds = _ds(labels=[0, 1], slide_labels=[0, 1], slides=["A", "B"],
                 patients=["P", "Q"], centers=["C1", "C2"])
        report = evaluate_predictions(np.eye(8)[[0, 0]], ds)
        assert set(report.centers) == {"C1", "C2"}
        assert report.centers["C1"]["patch"].metrics.acc == 1.0
        assert report.centers["C2"]["patch"].metrics.acc == 0.0

    def test_prediction_count_mismatch(self) -> None:
        ds = _ds(labels=[0], slide_labels=[0], slides=["A"], patients=["P"])
        with pytest.raises(ContractError):
            evaluate_predictions(np.eye(8)[[0, 1]], ds)

    def test_empty_test_set(self) -> None:
        with pytest.raises(ContractError):
            evaluate_predictions(np.zeros((0, 8)), PatchDataset.empty(8))


class TestLeakage:
    def test_split_overlap(self) -> None:
        split = SplitSpec(train_patients=frozenset({"P1", "P2"}),
                          test_patients=frozenset({"P2", "P3"}))
        with pytest.raises(LeakageError):
            check_leakage(split)

    def test_checkpoint_trained_on_test_patient(self) -> None:
        split = SplitSpec(train_patients=frozenset({"P9"}), test_patients=frozenset({"P0-0"}))
        with pytest.raises(LeakageError):
            check_leakage(split, _ckpt(train_patients=("P0-0",)))

    def test_disjoint_passes(self) -> None:
        split = SplitSpec(train_patients=frozenset({"P0-0"}), test_patients=frozenset({"P1-0"}))
        check_leakage(split, _ckpt(train_patients=("P0-0",)))

    def test_scored_training_patient(self) -> None:
        split = SplitSpec(train_patients=frozenset({"P0-0"}), test_patients=frozenset({"P1-0"}))
        check_leakage(split, evaluated=["P1-0"])
        with pytest.raises(LeakageError):
            check_leakage(split, evaluated=["P1-0", "P0-0"])


def _leaky_case(seed: int) -> tuple[SplitSpec, Checkpoint, PatchDataset]:
    """A split, checkpoint and scored test set that leak exactly one patient.

    ``seed % 3`` picks the route: the split itself overlaps, the checkpoint
    was trained on a test patient, or the scored set holds another slide of
    a training patient.
    """
    rng = np.random.default_rng(seed)
    per_class = int(rng.integers(2, 6))
    entries = [
        ManifestEntry(path=f"{pid}-S{s}.srh", patient_id=pid, slide_id=f"{pid}-S{s}",
                      label=label)
        for label in ALL_CLASSES
        for pid in [f"C{label.class_index}-P{i:03d}" for i in range(per_class)]
        for s in range(int(rng.integers(1, 3)))
    ]
    manifest = DatasetManifest(entries=entries)
    split = split_by_patient(manifest, float(rng.uniform(0.2, 0.5)), seed)
    train, test = sorted(split.train_patients), sorted(split.test_patients)
    victim_train = train[int(rng.integers(len(train)))]
    victim_test = test[int(rng.integers(len(test)))]
    scored = list(test)
    route = seed % 3
    if route == 0:
        split = SplitSpec(train_patients=split.train_patients | {victim_test},
                          test_patients=split.test_patients, seed=seed)
    elif route == 1:
        train = [*train, victim_test]
    else:
        scored.append(victim_train)

    slides, patients = [], []
    for e in manifest.entries:
        if e.patient_id in scored:
            # the training patient's slide is scored under a fresh slide suffix
            leaked = route == 2 and e.patient_id == victim_train
            slides.append(f"{e.patient_id}-S9" if leaked else e.slide_id)
            patients.append(e.patient_id)
    labels = [0] * len(slides)
    return split, _ckpt(train_patients=tuple(train)), _ds(labels, labels, slides, patients)


@pytest.mark.parametrize("seed", range(50))
def test_every_leaky_case_rejected(seed: int, tmp_path: Path) -> None:
    split, ckpt, ds = _leaky_case(seed)
    with pytest.raises(LeakageError):
        evaluate_testset(ckpt, DatasetManifest(), split, tiny_config(tmp_path), dataset=ds)


class TestEvaluateTestset:
    def test_report_from_checkpoint(self, tmp_path: Path) -> None:
        ds = toy_dataset(per_class=4)
        split = SplitSpec(train_patients=frozenset({"X"}),
                          test_patients=frozenset(ds.patient_ids.tolist()))
        report = evaluate_testset(_ckpt(train_patients=("X",)), DatasetManifest(), split,
                                  tiny_config(tmp_path), dataset=ds)
        assert set(report.grid()) == {"patch", "slide", "patient"}
        assert report.levels["patch"].n == len(ds)
        assert report.levels["patient"].n == 4
        for cell in report.grid().values():
            assert all(0.0 <= v <= 1.0 for v in cell.values())

    def test_leakage_checked_before_inference(self, tmp_path: Path) -> None:
        ds = toy_dataset()
        split = SplitSpec(train_patients=frozenset({"X"}),
                          test_patients=frozenset(ds.patient_ids.tolist()))
        with pytest.raises(LeakageError):
            evaluate_testset(_ckpt(train_patients=("P0-0",)), DatasetManifest(), split,
                             tiny_config(tmp_path), dataset=ds)

    def test_predictor_needs_probe(self) -> None:
        with pytest.raises(StateError):
            Predictor(_ckpt(probe=False))

    def test_predictor_outputs_distributions(self) -> None:
        probs = Predictor(_ckpt()).predict(toy_dataset().pixels, threads=2)
        assert probs.shape == (12, 8)
        assert probs.sum(axis=1) == pytest.approx(np.ones(12), abs=1e-6)


class TestReportFormat:
    def _report(self):
        ds = _ds(labels=[0, 1], slide_labels=[0, 1], slides=["A", "B"], patients=["P", "Q"])
        return evaluate_predictions(np.eye(8)[[0, 1]], ds, objective="supcon")

    def test_table_layout(self) -> None:
        text = format_table({"CE": self._report(), "SupCon + Linear": self._report()})
        lines = text.splitlines()
        assert "Patch" in lines[0] and "Slide" in lines[0] and "Patient" in lines[0]
        assert lines[1].startswith("Model")
        assert lines[1].count("Top-1") == 3
        assert lines[3].startswith("CE")
        assert lines[4].startswith("SupCon + Linear")
        assert lines[4].count("100.0%") == 9

    def test_json_schema(self, tmp_path: Path) -> None:
        json_path, text_path = write_eval_report(self._report(), tmp_path)
        assert json_path.name == JSON_REPORT_NAME
        assert text_path.name == TEXT_REPORT_NAME
        data = json.loads(json_path.read_text())
        assert [lvl["level"] for lvl in data["levels"]] == ["patch", "slide", "patient"]
        first = data["levels"][0]
        assert set(first["metrics"]) == {"acc", "top2", "mca"}
        assert len(first["confusion"]) == 8
        assert first["class_names"][0] == "pituitary_adenoma"
        assert "metrics_snapshot" in data
        assert text_path.read_text().startswith(" ")
