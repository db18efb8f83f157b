"""
Tests for metrics, the linear probe, checkpoint evaluation and the report bundle
"""

import itertools
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent))

from data.types import DiscLevel, Partition
from evaluation.evaluator import evaluate_checkpoint
from evaluation.metrics import (
    ConfusionMatrix3,
    balanced_accuracy,
    classification_summary,
    confusion_matrix,
    coordinate_rmse,
    ema,
    euclidean_rmse,
    majority_baseline,
    per_class_recall,
    severe_to_normal,
    severe_to_normal_rate,
)
from evaluation.probe import linear_probe
from evaluation.report import (
    OverlayCase,
    comparison_table,
    emit_report,
    render_localization_overlay,
)
from models.checkpoint import load_checkpoint, read_checkpoint_meta, restore_module
from models.encoder import DiscEncoder
from tests.conftest import tiny_config
from training.history import EpochRecord, TrainHistory
from training.trainer import classifier_encoder_spec, train_roi_regressor
from utils.exceptions import ConfigError, DataError, StageMismatchError

WORKED_COUNTS = [[8, 1, 1], [2, 3, 0], [1, 0, 3]]


def _labels_from_counts(counts):
    preds, labels = [], []
    for (true, pred), n in np.ndenumerate(np.asarray(counts)):
        labels += [true] * n
        preds += [pred] * n
    return preds, labels


class TestMetrics:
    def test_confusion_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            preds, labels = rng.integers(0, 3, n), rng.integers(0, 3, n)
            cm = confusion_matrix(preds, labels)
            for true, pred in itertools.product(range(3), range(3)):
                expected = int(np.sum((labels == true) & (preds == pred)))
                assert cm.counts[true, pred] == expected
            present = [g for g in range(3) if (labels == g).any()]
            expected = np.mean([np.mean(preds[labels == g] == g) for g in present])
            assert balanced_accuracy(cm) == pytest.approx(expected)

    def test_worked_matrix(self):
        cm = confusion_matrix(*_labels_from_counts(WORKED_COUNTS))
        np.testing.assert_allclose(per_class_recall(cm), [0.8, 0.6, 0.75])
        assert balanced_accuracy(cm) == pytest.approx((0.8 + 0.6 + 0.75) / 3)
        assert severe_to_normal_rate(cm) == pytest.approx(0.25)
        assert severe_to_normal(cm).numerator == 1

    def test_missing_class_left_out(self):
        cm = confusion_matrix([0, 1, 1, 0], [0, 1, 0, 0])
        assert math.isnan(per_class_recall(cm)[2])
        assert balanced_accuracy(cm) == pytest.approx((2 / 3 + 1.0) / 2)
        assert math.isnan(severe_to_normal_rate(cm))

    def test_perfect_and_inverted(self):
        labels = [0, 1, 2, 2]
        assert balanced_accuracy(confusion_matrix(labels, labels)) == 1.0
        assert balanced_accuracy(confusion_matrix([1, 2, 0, 0], labels)) == 0.0

    def test_bad_inputs(self):
        with pytest.raises(DataError):
            confusion_matrix([0, 3], [0, 1])
        with pytest.raises(DataError):
            confusion_matrix([0], [0, 1])
        with pytest.raises(DataError):
            confusion_matrix([], [])
        with pytest.raises(DataError):
            ConfusionMatrix3(np.zeros((2, 2)))

    def test_summary_is_self_consistent(self):
        counts = [[5, 0, 0], [1, 1, 0], [0, 1, 1]]
        summary = classification_summary(confusion_matrix(*_labels_from_counts(counts)))
        assert summary["n"] == 9
        assert summary["accuracy"] == pytest.approx(7 / 9)
        assert summary["severe_to_normal"] == {
            "rate": 0.0,
            "numerator": 0,
            "denominator": 2,
        }

    def test_rmse(self):
        rmse = coordinate_rmse([[0.0, 0.0]], [[5.0, 0.0]])
        assert rmse == pytest.approx(3.536, abs=1e-3)
        assert euclidean_rmse([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
        assert coordinate_rmse([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
        with pytest.raises(DataError):
            coordinate_rmse([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])

    def test_majority_baseline(self):
        baseline = majority_baseline([0, 0, 1], [0, 1, 2])
        assert baseline["predicted_grade"] == "normal"
        assert baseline["balanced_accuracy"] == pytest.approx(1 / 3)
        assert majority_baseline([1, 0], [0])["predicted_grade"] == "normal"

    def test_ema(self):
        assert ema([1.0, float("nan"), 0.0]) == pytest.approx([1.0, 1.0, 0.8])
        smoothed = ema([None, 2.0])
        assert math.isnan(smoothed[0]) and smoothed[1] == 2.0


class TestLinearProbe:
    def test_encoder_untouched(self, manifest, split, pretrain_result, tmp_path):
        meta, tensors = load_checkpoint(
            pretrain_result.best_checkpoint, expected_stages={"pretrain"}
        )
        config = tiny_config("probe", epochs=3)
        encoder = DiscEncoder(classifier_encoder_spec(config))
        restore_module(encoder, tensors, "encoder")
        before = {k: v.clone() for k, v in encoder.state_dict().items()}

        result = linear_probe(encoder, manifest, split, config, tmp_path)

        for key, value in encoder.state_dict().items():
            assert torch.equal(value, before[key]), key
        assert len(result.history) == 3
        assert 0.0 <= result.metrics["balanced_accuracy"] <= 1.0
        assert result.baseline["predicted_grade"] == "normal"
        assert read_checkpoint_meta(result.checkpoint).stage == "probe"

    def test_needs_probe_config(self, manifest, split):
        config = tiny_config("scratch")
        with pytest.raises(ConfigError):
            linear_probe(
                DiscEncoder(classifier_encoder_spec(config)), manifest, split, config
            )


class TestEvaluateCheckpoint:
    def test_validation_metrics(self, manifest, split, finetune_result, tmp_path):
        result = evaluate_checkpoint(finetune_result.best_checkpoint, manifest, split)
        summary = result.metrics["ground_truth_coords"]
        val_keys = split.keys_in(Partition.VAL)
        assert result.metrics["partition"] == "val"
        assert summary["n"] == len(val_keys)
        assert result.metrics["majority_baseline"]["predicted_grade"] == "normal"
        assert list(result.predictions["level"]) == [k.level.value for k in val_keys]
        probabilities = result.predictions[["p_normal", "p_moderate", "p_severe"]]
        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, rtol=1e-5)

        result.save(tmp_path)
        written = {p.name for p in tmp_path.iterdir()}
        assert {"metrics.json", "confusion.csv", "predictions.csv"} <= written
        confusion = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
        assert confusion.values.sum() == summary["n"]

    def test_never_augments(self, manifest, split, finetune_result, monkeypatch):
        def forbidden(*args, **kwargs):
            raise AssertionError("augmentation called during evaluation")

        monkeypatch.setattr("data.datasets.augment_view", forbidden)
        monkeypatch.setattr("processing.augmentation.augment_view", forbidden)
        evaluate_checkpoint(
            finetune_result.best_checkpoint, manifest, split, partition=Partition.TEST
        )

    def test_repeatable(self, manifest, split, finetune_result):
        first = evaluate_checkpoint(finetune_result.best_checkpoint, manifest, split)
        second = evaluate_checkpoint(finetune_result.best_checkpoint, manifest, split)
        pd.testing.assert_frame_equal(first.predictions, second.predictions)

    def test_slice_sets(self, manifest, split, finetune_result):
        checkpoint = finetune_result.best_checkpoint
        result = evaluate_checkpoint(checkpoint, manifest, split, slices_per_disc=3)
        assert result.metrics["slices_per_disc"] == 3
        with pytest.raises(ConfigError):
            evaluate_checkpoint(checkpoint, manifest, split, slices_per_disc=2)

    def test_rejects_pretrain_checkpoint(self, manifest, split, pretrain_result):
        with pytest.raises(StageMismatchError, match="pretrain"):
            evaluate_checkpoint(pretrain_result.best_checkpoint, manifest, split)

    def test_predicted_coords_need_regressor(self, manifest, split, finetune_result):
        with pytest.raises(ConfigError):
            evaluate_checkpoint(
                finetune_result.best_checkpoint,
                manifest,
                split,
                use_predicted_coords=True,
            )

    def test_predicted_coords(self, manifest, split, finetune_result, tmp_path):
        roi = train_roi_regressor(
            tiny_config("roi", epochs=1), manifest, split, tmp_path / "roi"
        )
        result = evaluate_checkpoint(
            finetune_result.best_checkpoint,
            manifest,
            split,
            use_predicted_coords=True,
            roi_checkpoint=roi.best_checkpoint,
        )
        metrics = result.metrics
        assert metrics["localization"]["rmse_px"] >= 0.0
        assert metrics["predicted_coords"]["n"] == metrics["ground_truth_coords"]["n"]
        columns = set(result.predictions.columns)
        assert {"x_pred", "y_pred", "pred_with_predicted_coords"} <= columns
        assert len(result.predicted_centers) == len(split.keys_in(Partition.VAL))


class TestReport:
    def _history(self):
        history = TrainHistory(stage="finetune")
        trajectory = [(0.4, 0.5), (0.6, None), (0.5, 0.7)]
        for epoch, (acc, recall) in enumerate(trajectory, start=1):
            history.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=1.0 / epoch,
                    val_loss=1.1 / epoch,
                    lr=1e-4,
                    val_balanced_accuracy=acc,
                    val_recall_normal=0.9,
                    val_recall_moderate=recall,
                    val_recall_severe=None,
                )
            )
        return history

    def _metrics(self):
        summary = classification_summary(
            confusion_matrix(*_labels_from_counts(WORKED_COUNTS))
        )
        return {
            "ground_truth_coords": summary,
            "comparison": {"fine_tuned": summary, "scratch": summary},
        }

    def test_bundle_files(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(128, 128)).astype(np.uint8)
        case = OverlayCase(
            patient_id="P0001",
            image=image,
            truth={DiscLevel.L4_L5: (64.0, 64.0)},
            predicted={DiscLevel.L4_L5: (70.0, 60.0)},
        )
        bundle = emit_report(
            {"finetune": self._history()}, self._metrics(), tmp_path, [case]
        )
        names = {p.name for p in bundle.files}
        assert {
            "metrics.json",
            "confusion.csv",
            "confusion.png",
            "comparison.csv",
            "history_finetune.csv",
            "loss_lr_finetune.png",
            "balanced_accuracy_finetune.png",
            "recall_finetune.png",
            "localization_P0001.png",
        } <= names
        assert all(p.is_file() for p in bundle.files)

    def test_comparison_table(self):
        table = comparison_table(self._metrics()["comparison"])
        assert list(table["model"]) == ["fine_tuned", "scratch"]
        assert table.loc[0, "severe_to_normal_count"] == "1/4"
        assert table.loc[0, "recall_moderate"] == pytest.approx(0.6)

    def test_overlay_panels(self):
        image = np.zeros((100, 100), dtype=np.uint8)
        case = OverlayCase(
            patient_id="P",
            image=image,
            truth={DiscLevel.L1_L2: (10.0, 10.0), DiscLevel.L2_L3: (50.0, 50.0)},
            predicted={DiscLevel.L1_L2: (12.0, 9.0)},
        )
        panel = render_localization_overlay(case, half=48, scale=2)
        assert panel.shape == (2 * 192, 2 * 192, 3)

    def test_nothing_to_report(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report({}, {}, tmp_path)
