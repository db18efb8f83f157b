"""
Short tiny-preset training runs on the session phantom
"""

import math
import sys
from pathlib import Path

import pytest
from safetensors.torch import load_file

sys.path.append(str(Path(__file__).parent.parent))

from config.run_config import Preset
from data.splitting import stratified_disc_split
from models.checkpoint import read_checkpoint_meta
from tests.conftest import tiny_config
from training.history import TrainHistory
from training.schedulers import cosine_lr, replay_plateau
from training.trainer import (
    BEST_CHECKPOINT,
    HISTORY_FILE,
    DiscGradeTrainer,
    train_roi_regressor,
    train_scratch_classifier,
)
from utils.exceptions import ConfigError, StageMismatchError

FROZEN = ("stem", "layer1", "layer2", "layer3")


class TestPretrain:
    def test_outputs(self, pretrain_result):
        out = pretrain_result.out_dir
        assert (out / BEST_CHECKPOINT).is_file()
        assert (out / "last.safetensors").is_file()
        history = TrainHistory.load_csv(out / HISTORY_FILE)
        assert [r.epoch for r in history.records] == [1, 2]
        for r in history.records:
            assert math.isfinite(r.train_loss) and math.isfinite(r.val_loss)

    def test_checkpoint_metadata(self, pretrain_result):
        meta = read_checkpoint_meta(pretrain_result.best_checkpoint)
        assert meta.stage == "pretrain"
        assert meta.preset == "tiny"
        assert meta.epoch == pretrain_result.best_epoch
        assert meta.config["temperature"] == 0.1

    def test_lr_follows_cosine(self, pretrain_result):
        config = tiny_config("pretrain")
        for record in pretrain_result.history.records:
            expected = cosine_lr(
                config.optimizer.lr,
                record.epoch - 1,
                config.epochs,
                config.scheduler.eta_min,
            )
            assert record.lr == expected, record.epoch


class TestFinetune:
    def test_frozen_stages_match_pretrained_encoder(
        self, pretrain_result, finetune_result
    ):
        pretrained = load_file(str(pretrain_result.best_checkpoint))
        finetuned = load_file(str(finetune_result.best_checkpoint))
        compared = 0
        for key, value in pretrained.items():
            if not key.startswith("encoder."):
                continue
            stage = key.split(".")[1]
            if stage in FROZEN:
                assert (finetuned[f"classifier.{key}"] == value).all(), key
                compared += 1
        assert compared > 0

    def test_history_has_validation_metrics(self, finetune_result):
        record = finetune_result.history.records[0]
        assert 0.0 <= record.val_balanced_accuracy <= 1.0
        assert record.val_recall_normal is not None

    def test_head_rate_is_ten_times_backbone(self, finetune_result):
        config = read_checkpoint_meta(finetune_result.best_checkpoint).config
        optimizer = config["optimizer"]
        assert optimizer["head_lr"] == pytest.approx(10 * optimizer["lr"])

    def test_rejects_classifier_checkpoint_as_pretrained(
        self, manifest, split, finetune_result, tmp_path
    ):
        trainer = DiscGradeTrainer(tiny_config("finetune"), tmp_path)
        with pytest.raises(StageMismatchError):
            trainer.finetune_classifier(
                manifest, split, finetune_result.best_checkpoint
            )

    def test_rejects_preset_mismatch(self, manifest, split, pretrain_result, tmp_path):
        config = tiny_config("finetune").model_copy(update={"preset": Preset.STANDARD})
        with pytest.raises(StageMismatchError):
            DiscGradeTrainer(config, tmp_path).finetune_classifier(
                manifest, split, pretrain_result.best_checkpoint
            )


class TestScratchAndRoi:
    def test_scratch_is_deterministic(self, manifest, split, tmp_path):
        config = tiny_config("scratch")
        first = train_scratch_classifier(config, manifest, split, tmp_path / "a")
        second = train_scratch_classifier(config, manifest, split, tmp_path / "b")
        assert first.history.records == second.history.records
        assert first.best_epoch == second.best_epoch

    def test_lr_follows_plateau_replay(self, manifest, split, tmp_path):
        scheduler = {"patience": 0, "factor": 0.5}
        config = tiny_config("scratch", epochs=4, scheduler=scheduler)
        result = train_scratch_classifier(config, manifest, split, tmp_path)
        records = result.history.records
        expected = replay_plateau(
            [r.val_balanced_accuracy for r in records],
            config.optimizer.lr,
            mode="max",
            patience=0,
            factor=0.5,
            min_delta=config.scheduler.min_delta,
        )
        assert [r.lr for r in records] == expected

    def test_roi_regressor(self, manifest, split, tmp_path):
        config = tiny_config("roi", epochs=1)
        result = train_roi_regressor(config, manifest, split, tmp_path)
        record = result.history.records[0]
        assert record.val_rmse is not None and record.val_rmse >= 0.0
        assert read_checkpoint_meta(result.best_checkpoint).stage == "roi"


class TestStageGuards:
    def test_empty_validation_partition(self, manifest, tmp_path):
        all_train = stratified_disc_split(manifest, (1.0, 0.0, 0.0), seed=0)
        with pytest.raises(ConfigError, match="val"):
            trainer = DiscGradeTrainer(tiny_config("pretrain"), tmp_path)
            trainer.pretrain_contrastive(manifest, all_train)

    def test_wrong_stage_config(self, manifest, split, tmp_path):
        with pytest.raises(ConfigError):
            trainer = DiscGradeTrainer(tiny_config("scratch"), tmp_path)
            trainer.pretrain_contrastive(manifest, split)

    def test_stale_best_checkpoint_removed(self, tmp_path):
        stale = tmp_path / BEST_CHECKPOINT
        stale.write_bytes(b"old run")
        DiscGradeTrainer(tiny_config("scratch"), tmp_path)
        assert not stale.exists()
