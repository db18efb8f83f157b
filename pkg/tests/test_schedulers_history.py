"""
Tests for learning-rate schedules, gradient clipping, epoch history
and checkpoint selection
"""

import math
import sys
from pathlib import Path

import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent))

from config.run_config import SchedulerConfig
from training.history import (
    EpochRecord,
    TrainHistory,
    is_improvement,
    select_best_checkpoint,
)
from training.schedulers import (
    PlateauState,
    cosine_lr,
    plateau_step,
    replay_plateau,
    set_group_lrs,
)
from training.trainer import LrController, clip_gradient_norm
from utils.exceptions import DataError, NumericError


def _history(values, criterion="val_balanced_accuracy"):
    history = TrainHistory(stage="finetune")
    for epoch, value in enumerate(values, start=1):
        record = EpochRecord(
            epoch=epoch, train_loss=1.0, val_loss=1.0, lr=1e-3, **{criterion: value}
        )
        history.append(record)
    return history


class TestCosine:
    def test_closed_form(self):
        for epoch in range(40):
            expected = 1e-6 + (1e-3 - 1e-6) * (1 + math.cos(math.pi * epoch / 40)) / 2
            assert abs(cosine_lr(1e-3, epoch, 40, eta_min=1e-6) - expected) <= 1e-10

    def test_first_and_last_epoch(self):
        assert cosine_lr(0.1, 0, 60) == pytest.approx(0.1)
        assert cosine_lr(0.1, 59, 60) < 0.02 * 0.1

    def test_rejects_zero_epochs(self):
        with pytest.raises(ValueError):
            cosine_lr(0.1, 0, 0)


class TestPlateau:
    def test_improving_sequence_never_reduces(self):
        metrics = [0.1 * i for i in range(10)]
        rates = replay_plateau(metrics, 1.0, mode="max", patience=4, factor=0.5)
        assert rates == [1.0] * 10

    def test_constant_metric_patience_four(self):
        # epoch 1 sets the best, epochs 2-6 are the five non-improving ones
        rates = replay_plateau([0.5] * 8, 1.0, mode="max", patience=4, factor=0.5)
        assert rates == [1.0] * 6 + [0.5] * 2

    def test_roi_settings_patience_three(self):
        rates = replay_plateau([1.0] * 6, 1e-4, mode="min", patience=3, factor=0.1)
        assert rates[:5] == [1e-4] * 5
        assert rates[5] == pytest.approx(1e-5)

    def test_two_stagnation_phases(self):
        state = PlateauState()
        for metric in [0.5] * 6 + [0.5] * 5:
            state = plateau_step(state, metric, mode="max", patience=4, factor=0.5)
        assert state.num_reductions == 2
        assert state.lr(1.0) == pytest.approx(0.25)

    def test_improvement_resets_counter(self):
        state = PlateauState()
        for metric in (0.5, 0.5, 0.5, 0.6):
            state = plateau_step(state, metric, mode="max")
        assert state.num_bad_epochs == 0
        assert state.best == 0.6

    def test_min_delta(self):
        state = plateau_step(PlateauState(), 0.5, mode="max")
        state = plateau_step(state, 0.50005, mode="max", min_delta=1e-4)
        assert state.num_bad_epochs == 1

    def test_nan_is_never_an_improvement(self):
        state = plateau_step(PlateauState(), float("nan"), mode="min")
        assert state.best is None
        state = plateau_step(state, 2.0, mode="min")
        assert state.best == 2.0

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            plateau_step(PlateauState(), 1.0, factor=1.5)

    def test_controller_applies_rates_to_groups(self):
        params = [torch.nn.Parameter(torch.zeros(1)) for _ in range(2)]
        optimizer = torch.optim.SGD(
            [
                {"params": [params[0]], "lr": 1e-4},
                {"params": [params[1]], "lr": 1e-3},
            ]
        )
        scheduler = SchedulerConfig(name="plateau", mode="max", patience=0, factor=0.5)
        control = LrController(optimizer, scheduler, 10)
        assert control.begin_epoch(0) == [1e-4, 1e-3]
        control.end_epoch(0.5)
        control.end_epoch(0.5)
        rates = control.begin_epoch(2)
        assert rates == pytest.approx([5e-5, 5e-4])
        assert rates[1] / rates[0] == pytest.approx(10.0)
        assert [g["lr"] for g in optimizer.param_groups] == rates

    def test_set_group_lrs_checks_length(self):
        optimizer = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=0.1)
        with pytest.raises(ValueError):
            set_group_lrs(optimizer, [0.1, 0.2])


class TestGradientClipping:
    def test_below_threshold(self):
        g = torch.tensor([0.3, 0.4])
        assert clip_gradient_norm([g], 1.0) == 1.0
        torch.testing.assert_close(g, torch.tensor([0.3, 0.4]))

    def test_pythagorean_case(self):
        g = torch.tensor([3.0, 4.0])
        assert clip_gradient_norm([g], 1.0) == pytest.approx(0.2)
        assert torch.linalg.vector_norm(g).item() == pytest.approx(1.0)

    def test_zero_gradients(self):
        g = torch.zeros(5)
        assert clip_gradient_norm([g, None], 1.0) == 1.0

    def test_global_norm_across_tensors(self):
        a, b = torch.tensor([3.0]), torch.tensor([4.0])
        clip_gradient_norm([a, b], 2.5)
        assert a.item() == pytest.approx(1.5)
        assert b.item() == pytest.approx(2.0)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            clip_gradient_norm([torch.tensor([float("inf")])], 1.0)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            clip_gradient_norm([torch.ones(2)], 0.0)

    def test_infinite_threshold_step_matches_unclipped_step(self):
        def step(max_norm):
            torch.manual_seed(0)
            model = torch.nn.Sequential(
                torch.nn.Linear(6, 4), torch.nn.Tanh(), torch.nn.Linear(4, 3)
            ).double()
            optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2)
            x = torch.randn(8, 6, dtype=torch.float64)
            loss = (model(x) ** 2).sum() * 100.0
            loss.backward()
            if max_norm is not None:
                grads = (p.grad for p in model.parameters())
                assert clip_gradient_norm(grads, max_norm) == 1.0
            optimizer.step()
            return [p.detach().clone() for p in model.parameters()]

        for clipped, plain in zip(step(math.inf), step(None)):
            assert torch.equal(clipped, plain)


class TestHistory:
    def test_monotone_improvement_selects_last(self):
        history = _history([0.1, 0.2, 0.3, 0.4])
        assert select_best_checkpoint(history, "val_balanced_accuracy") == 4

    def test_tie_goes_to_earlier_epoch(self):
        values = [0.1, 0.2, 0.7, 0.3, 0.5, 0.6, 0.7, 0.1]
        assert select_best_checkpoint(_history(values), "val_balanced_accuracy") == 3

    def test_mid_run_peak(self):
        rising = [0.4 + 0.015 * i for i in range(21)]
        falling = [rising[-1] - 0.01 * i for i in range(1, 20)]
        history = _history(rising + falling)
        assert select_best_checkpoint(history, "val_balanced_accuracy") == 21

    def test_min_criterion_and_nan(self):
        history = _history([float("nan"), 3.0, 2.0, float("nan")], criterion="val_rmse")
        assert select_best_checkpoint(history, "val_rmse") == 3

    def test_empty_history(self):
        with pytest.raises(DataError):
            select_best_checkpoint(TrainHistory(stage="x"), "val_loss")

    def test_unknown_criterion(self):
        with pytest.raises(DataError):
            select_best_checkpoint(_history([0.1]), "accuracy")

    def test_epochs_must_increase(self):
        history = _history([0.1, 0.2])
        with pytest.raises(DataError):
            history.append(EpochRecord(epoch=2, train_loss=1.0, val_loss=1.0, lr=1e-3))

    def test_is_improvement(self):
        assert is_improvement(0.5, None, "val_balanced_accuracy")
        assert not is_improvement(0.5, 0.5, "val_balanced_accuracy")
        assert is_improvement(1.0, 2.0, "val_loss")
        assert not is_improvement(float("nan"), 2.0, "val_loss")

    def test_csv_round_trip(self, tmp_path):
        history = _history([0.25, None, 0.5])
        path = history.save_csv(tmp_path / "finetune" / "history.csv")
        loaded = TrainHistory.load_csv(path)
        assert loaded.stage == "finetune"
        assert loaded.records == history.records
