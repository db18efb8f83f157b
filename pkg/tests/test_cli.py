"""
Tests for the command line surface and its exit codes
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent))

from cli import EXIT_INVALID, EXIT_OK, build_parser, dispatch


class TestParser:
    def test_run_all_defaults_to_tiny(self):
        args = build_parser().parse_args(["run-all", "--out", "runs/x"])
        assert args.preset == "tiny"
        assert args.seed == 0

    def test_training_preset_flags(self):
        parser = build_parser()
        base = ["pretrain", "--manifest", "m.csv", "--split", "s.csv", "--out", "o"]
        assert parser.parse_args(base).preset is None
        assert parser.parse_args(base + ["--tiny"]).preset == "tiny"
        assert parser.parse_args(base + ["--standard"]).preset == "standard"

    def test_sub_and_global_config(self):
        argv = ["--config", "a.toml", "probe", "--ckpt", "c", "--manifest", "m"]
        argv += ["--split", "s", "--out", "o", "--config", "b.json"]
        args = build_parser().parse_args(argv)
        assert args.global_config == "a.toml"
        assert args.config == "b.json"


class TestDispatch:
    def test_no_command(self, capsys):
        assert dispatch([]) == EXIT_INVALID

    def test_help(self, capsys):
        assert dispatch(["--help"]) == EXIT_OK
        assert "run-all" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert dispatch(["split", "--manifest", "m.csv", "--bogus"]) == EXIT_INVALID
        assert "error" in capsys.readouterr().err

    def test_conflicting_presets(self, capsys):
        argv = ["run-all", "--out", "x", "--tiny", "--standard"]
        assert dispatch(argv) == EXIT_INVALID

    def test_finetune_needs_pretrained(self, capsys):
        argv = ["finetune", "--manifest", "m.csv", "--split", "s.csv", "--out", "o"]
        assert dispatch(argv) == EXIT_INVALID
        assert "--pretrained" in capsys.readouterr().err

    def test_missing_config_file(self, manifest_path, tmp_path, capsys):
        missing = tmp_path / "absent.toml"
        argv = ["--config", str(missing), "split", "--manifest", str(manifest_path)]
        argv += ["--out", str(tmp_path / "s.csv")]
        assert dispatch(argv) == EXIT_INVALID
        assert str(missing) in capsys.readouterr().err
        assert not (tmp_path / "s.csv").exists()

    def test_bad_configured_log_level(
        self, manifest_path, tmp_path, monkeypatch, capsys
    ):
        from config.settings import settings

        monkeypatch.setattr(settings, "log_level", "LOUD")
        argv = ["split", "--manifest", str(manifest_path)]
        argv += ["--out", str(tmp_path / "s.csv")]
        assert dispatch(argv) == EXIT_INVALID
        assert "LOUD" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        argv = ["split", "--manifest", str(tmp_path / "none.csv")]
        argv += ["--out", str(tmp_path / "s.csv")]
        assert dispatch(argv) == EXIT_INVALID

    def test_invalid_phantom_settings(self, tmp_path, capsys):
        argv = ["gen-phantom", "--patients", "0", "--out", str(tmp_path)]
        assert dispatch(argv) == EXIT_INVALID

    def test_evaluate_rejects_pretrain_checkpoint(
        self, manifest_path, split_path, pretrain_result, tmp_path, capsys
    ):
        argv = [
            "evaluate",
            "--ckpt",
            str(pretrain_result.best_checkpoint),
            "--manifest",
            str(manifest_path),
            "--split",
            str(split_path),
            "--out",
            str(tmp_path),
        ]
        assert dispatch(argv) == EXIT_INVALID
        assert "pretrain" in capsys.readouterr().err


class TestCommands:
    def test_gen_phantom(self, tmp_path, capsys):
        out = tmp_path / "phantom"
        argv = ["gen-phantom", "--patients", "2", "--image-size", "128"]
        argv += ["--slices", "3", "--seed", "4", "--out", str(out)]
        assert dispatch(argv) == EXIT_OK
        frame = pd.read_csv(out / "manifest.csv")
        assert len(frame) == 10
        record = json.loads((out / "inputs.json").read_text())
        assert record["command"] == "gen-phantom"
        assert record["parameters"]["n_patients"] == 2

    def test_split(self, manifest_path, tmp_path, capsys):
        out = tmp_path / "split.csv"
        argv = ["split", "--manifest", str(manifest_path), "--seed", "2"]
        argv += ["--out", str(out)]
        assert dispatch(argv) == EXIT_OK
        assert out.is_file()
        audit = json.loads((tmp_path / "split.audit.json").read_text())
        assert audit["violations"] == []
        inputs = json.loads((tmp_path / "split.inputs.json").read_text())
        assert inputs["inputs"]["manifest"]["sha256"] is not None

    def test_split_is_reproducible(self, manifest_path, tmp_path, capsys):
        for name in ("a.csv", "b.csv"):
            argv = ["split", "--manifest", str(manifest_path)]
            assert dispatch(argv + ["--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    @pytest.mark.slow
    def test_run_all_tiny(self, tmp_path, capsys):
        out = tmp_path / "run"
        argv = ["run-all", "--out", str(out), "--patients", "20", "--image-size", "128"]
        argv += ["--slices", "5", "--seed", "1"]
        assert dispatch(argv) == EXIT_OK
        metrics = json.loads((out / "evaluation" / "metrics.json").read_text())
        models = {"scratch", "linear_probe", "fine_tuned", "majority"}
        assert set(metrics["comparison"]) == models
        assert metrics["localization"]["rmse_px"] >= 0.0
        assert (out / "report" / "comparison.csv").is_file()
        assert (out / "report" / "history_finetune.csv").is_file()
