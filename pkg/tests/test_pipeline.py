"""
Tests for the pipeline orchestrator
"""

import json
import sys
from pathlib import Path

import pytest

sys.path.append(str(Path(__file__).parent.parent))

from config.run_config import Preset, RunConfig, Stage
from data.splitting import save_split
from data.types import Partition, SplitAssignment
from main import DiscGradePipeline
from utils.exceptions import (
    ConfigError,
    DataError,
    InconsistencyError,
    StageMismatchError,
)


def _leaking_split(manifest, tmp_path):
    keys = manifest.disc_keys()
    entries = [(k, Partition.TRAIN) for k in keys] + [(keys[0], Partition.VAL)]
    assignment = SplitAssignment(
        entries=tuple(entries), seed=0, fractions=(0.7, 0.15, 0.15)
    )
    return save_split(assignment, tmp_path / "leak.csv")


class TestConfiguration:
    def test_stage_seed_is_stable(self):
        pipeline = DiscGradePipeline(seed=7)
        again = DiscGradePipeline(seed=7)
        assert pipeline.stage_seed("pretrain") == again.stage_seed("pretrain")
        assert pipeline.stage_seed("pretrain") != pipeline.stage_seed("finetune")

    def test_config_file_and_cli_precedence(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('batch_size = 4\n\n[finetune]\nepochs = 3\npreset = "tiny"\n')
        pipeline = DiscGradePipeline(seed=1, config_file=path)
        config = pipeline.stage_config(Stage.FINETUNE)
        assert (config.epochs, config.batch_size, config.preset) == (3, 4, Preset.TINY)
        assert pipeline.stage_config(Stage.FINETUNE, epochs=9).epochs == 9
        assert pipeline.stage_config(Stage.SCRATCH).preset == Preset.STANDARD

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            DiscGradePipeline(config_file=tmp_path / "absent.json")

    def test_every_stage_clips_by_default(self):
        for stage in Stage:
            assert RunConfig.for_stage(stage, Preset.TINY).clip_max_norm == 1.0
        assert RunConfig.for_stage(Stage.ROI, clip_max_norm=None).clip_max_norm is None

    def test_bad_config_value(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"pretrain": {"temperature": -1}}))
        with pytest.raises(ConfigError):
            DiscGradePipeline(config_file=path).stage_config(Stage.PRETRAIN)


class TestStageGuards:
    def test_finetune_needs_pretrained(self, manifest_path, split_path, tmp_path):
        with pytest.raises(ConfigError):
            DiscGradePipeline(preset="tiny").finetune(
                manifest_path, split_path, None, tmp_path
            )

    def test_leaking_split_is_refused(self, manifest, manifest_path, tmp_path):
        leaking = _leaking_split(manifest, tmp_path)
        with pytest.raises(InconsistencyError):
            DiscGradePipeline(preset="tiny").pretrain(
                manifest_path, leaking, tmp_path / "out", epochs=1
            )

    def test_linear_evaluation_refuses_leaking_split(
        self, manifest, manifest_path, pretrain_result, tmp_path
    ):
        leaking = _leaking_split(manifest, tmp_path)
        checkpoint = pretrain_result.best_checkpoint
        out_dir = tmp_path / "out"
        with pytest.raises(InconsistencyError, match="leaks"):
            DiscGradePipeline(preset="tiny").probe(
                checkpoint, manifest_path, leaking, out_dir, epochs=1
            )
        assert not (out_dir / "metrics.json").exists()

    def test_probe_preset_must_match_checkpoint(
        self, manifest_path, split_path, pretrain_result, tmp_path
    ):
        with pytest.raises(StageMismatchError):
            DiscGradePipeline(preset="standard").probe(
                pretrain_result.best_checkpoint, manifest_path, split_path, tmp_path
            )

    def test_report_needs_content(self, tmp_path):
        with pytest.raises(DataError):
            DiscGradePipeline().report(tmp_path)
        with pytest.raises(FileNotFoundError):
            DiscGradePipeline().report(tmp_path / "absent")


class TestStages:
    def test_preprocess_writes_validation_and_rois(self, manifest_path, tmp_path):
        index = DiscGradePipeline().preprocess(manifest_path, tmp_path)
        assert index.is_file()
        validation = json.loads((tmp_path / "validation.json").read_text())
        assert validation["valid"] is True
        assert (tmp_path / "inputs.json").is_file()

    def test_probe_records_metrics(
        self, manifest_path, split_path, pretrain_result, tmp_path
    ):
        result = DiscGradePipeline(seed=3).probe(
            pretrain_result.best_checkpoint,
            manifest_path,
            split_path,
            tmp_path,
            epochs=2,
        )
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["best_epoch"] == result.best_epoch
        assert set(metrics) == {"probe", "majority_baseline", "best_epoch"}
        inputs = json.loads((tmp_path / "inputs.json").read_text())
        assert inputs["command"] == "probe"
        assert inputs["parameters"]["preset"] == "tiny"
        assert (tmp_path / "run.log").is_file()

    def test_report_from_stage_directories(
        self, pretrain_result, finetune_result, tmp_path
    ):
        run = tmp_path / "run"
        stages = (("pretrain", pretrain_result), ("finetune", finetune_result))
        for name, result in stages:
            result.history.save_csv(run / name / "history.csv")
        bundle = DiscGradePipeline().report(run)
        names = {p.name for p in bundle.files}
        assert {
            "history_pretrain.csv",
            "history_finetune.csv",
            "balanced_accuracy_finetune.png",
        } <= names
        assert "balanced_accuracy_pretrain.png" not in names


@pytest.mark.slow
class TestRunAll:
    def test_repeatable(self, tmp_path):
        results = []
        for name in ("a", "b"):
            pipeline = DiscGradePipeline(seed=0, preset="tiny")
            results.append(
                pipeline.run_all(
                    tmp_path / name, patients=40, image_size=128, slices=5
                )
            )
        first, second = results
        assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)
        first_split = (tmp_path / "a" / "split.csv").read_bytes()
        assert first_split == (tmp_path / "b" / "split.csv").read_bytes()

    def test_phantom_acceptance(self, tmp_path):
        pipeline = DiscGradePipeline(seed=0, preset="tiny")
        metrics = pipeline.run_all(tmp_path, patients=200, image_size=256)
        fine_tuned = metrics["ground_truth_coords"]
        comparison = metrics["comparison"]
        probe = comparison["linear_probe"]["balanced_accuracy"]
        assert fine_tuned["balanced_accuracy"] >= 0.85
        assert fine_tuned["severe_to_normal"]["rate"] <= 0.05
        assert fine_tuned["balanced_accuracy"] > probe
        assert probe > comparison["majority"]["balanced_accuracy"]
        assert metrics["localization"]["rmse_px"] <= 8.0
