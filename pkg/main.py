#!/usr/bin/env python3
"""
Pipeline orchestrator for disc-level stenosis grading.
Each method runs one stage, records its inputs next to its outputs and
returns the stage result; run_all chains every stage into one run directory.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import ValidationError

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from config.run_config import (
    Preset,
    RunConfig,
    Stage,
    config_hash,
    load_config_file,
    resolve_run_config,
)
from config.settings import settings
from data.manifest import load_manifest, validate_manifest
from data.phantom import PhantomConfig, generate_phantom_dataset
from data.splitting import (
    DEFAULT_FRACTIONS,
    audit_leakage,
    load_split,
    save_split,
    stratified_disc_split,
)
from data.types import DatasetManifest, DiscKey, Partition, SplitAssignment
from evaluation.evaluator import EvaluationResult, evaluate_checkpoint
from evaluation.probe import ProbeResult, linear_probe
from evaluation.report import OverlayCase, ReportBundle, emit_report, overlay_cases
from models.checkpoint import load_checkpoint, restore_module
from models.encoder import DiscEncoder
from processing.preprocessing import export_rois
from training.history import TrainHistory
from training.trainer import (
    HISTORY_FILE,
    StageResult,
    classifier_encoder_spec,
    finetune_classifier,
    pretrain_contrastive,
    train_roi_regressor,
    train_scratch_classifier,
)
from utils.exceptions import (
    ConfigError,
    DataError,
    InconsistencyError,
    ManifestValidationError,
)
from utils.file_manager import FileManager, json_sha256, load_json, save_json
from utils.logger import run_log
from utils.seeding import derive_seed

PathLike = Union[str, Path]

STAGE_DIRS = {
    Stage.PRETRAIN: "pretrain",
    Stage.FINETUNE: "finetune",
    Stage.PROBE: "probe",
    Stage.SCRATCH: "scratch",
    Stage.ROI: "roi",
}
COMPARISON_ROWS = (
    ("scratch", Stage.SCRATCH),
    ("linear_probe", Stage.PROBE),
    ("fine_tuned", Stage.FINETUNE),
)


class DiscGradePipeline:
    """Runs pipeline stages with one root seed and one optional config file"""

    def __init__(
        self,
        seed: Optional[int] = None,
        config_file: Optional[PathLike] = None,
        preset: Optional[Union[Preset, str]] = None,
    ):
        self.logger = logging.getLogger(__name__)
        self.settings = settings
        self.seed = seed
        self.config_file = Path(config_file) if config_file else None
        self.file_values = (
            load_config_file(self.config_file) if self.config_file else {}
        )
        self.preset = Preset(preset) if preset else None

    def stage_seed(self, name: str) -> int:
        return derive_seed(self.seed if self.seed is not None else 0, name)

    def stage_config(
        self,
        stage: Stage,
        epochs: Optional[int] = None,
        preset: Optional[Union[Preset, str]] = None,
    ) -> RunConfig:
        overrides: Dict[str, Any] = {"epochs": epochs}
        if self.seed is not None:
            overrides["seed"] = self.stage_seed(stage.value)
        return resolve_run_config(
            stage, self.file_values, overrides, preset=preset or self.preset
        )

    def _inputs(self, **paths) -> Dict[str, Optional[PathLike]]:
        paths["config"] = self.config_file
        return paths

    # data stages

    def generate_phantom(
        self,
        out_dir: PathLike,
        patients: int = 200,
        image_size: Optional[int] = None,
        slices: Optional[int] = None,
    ) -> DatasetManifest:
        values: Dict[str, Any] = {
            "n_patients": patients,
            "seed": self.stage_seed("phantom"),
        }
        if image_size is not None:
            values["image_size"] = image_size
        if slices is not None:
            values["slices_per_series"] = slices
        try:
            config = PhantomConfig(**values)
        except ValidationError as e:
            raise ConfigError(f"invalid phantom settings: {e}") from e
        manifest = generate_phantom_dataset(config, out_dir)
        parameters = config.model_dump(mode="json")
        FileManager(out_dir).record_inputs(
            "gen-phantom", {}, json_sha256(parameters), parameters
        )
        return manifest

    def load_valid_manifest(self, manifest_path: PathLike) -> DatasetManifest:
        manifest = load_manifest(manifest_path)
        report = validate_manifest(manifest)
        if not report.ok:
            raise ManifestValidationError(report.violations)
        return manifest

    def load_audited_split(
        self, split_path: PathLike, manifest: DatasetManifest
    ) -> SplitAssignment:
        split = load_split(split_path)
        audit = audit_leakage(split, manifest)
        if not audit.ok:
            raise InconsistencyError(
                f"split {split_path} leaks discs across partitions: {audit.violations}"
            )
        return split

    def preprocess(self, manifest_path: PathLike, out_dir: PathLike) -> Path:
        manifest = load_manifest(manifest_path)
        report = validate_manifest(manifest)
        files = FileManager(out_dir)
        save_json(files.path("validation.json"), report.to_dict())
        if not report.ok:
            raise ManifestValidationError(report.violations)
        config = self.stage_config(Stage.FINETUNE).preprocess
        index = export_rois(manifest, out_dir, config)
        parameters = config.model_dump(mode="json")
        files.record_inputs(
            "preprocess",
            self._inputs(manifest=manifest_path),
            json_sha256(parameters),
            parameters,
        )
        return index

    def make_split(
        self,
        manifest_path: PathLike,
        out_file: PathLike,
        fractions: Sequence[float] = DEFAULT_FRACTIONS,
    ) -> Path:
        manifest = self.load_valid_manifest(manifest_path)
        seed = self.stage_seed("split")
        split = stratified_disc_split(manifest, fractions, seed=seed)
        audit = audit_leakage(split, manifest)
        if not audit.ok:
            raise InconsistencyError(
                f"split audit failed: {audit.violations + audit.missing}"
            )
        out_file = Path(out_file)
        save_split(split, out_file)
        save_json(out_file.with_name(f"{out_file.stem}.audit.json"), audit.to_dict())
        FileManager(out_file.parent).record_inputs(
            "split",
            self._inputs(manifest=manifest_path),
            None,
            {"seed": split.seed, "fractions": list(split.fractions)},
            filename=f"{out_file.stem}.inputs.json",
        )
        return out_file

    # training stages

    def _train(
        self,
        stage: Stage,
        manifest_path: PathLike,
        split_path: PathLike,
        out_dir: PathLike,
        epochs: Optional[int],
        pretrained: Optional[PathLike] = None,
    ) -> StageResult:
        if stage == Stage.FINETUNE and pretrained is None:
            raise ConfigError("finetune needs a pretrained checkpoint (--pretrained)")
        config = self.stage_config(stage, epochs)
        manifest = self.load_valid_manifest(manifest_path)
        split = self.load_audited_split(split_path, manifest)

        with run_log(out_dir):
            if stage == Stage.PRETRAIN:
                result = pretrain_contrastive(config, manifest, split, out_dir)
            elif stage == Stage.FINETUNE:
                result = finetune_classifier(
                    config, manifest, split, pretrained, out_dir
                )
            elif stage == Stage.SCRATCH:
                result = train_scratch_classifier(config, manifest, split, out_dir)
            elif stage == Stage.ROI:
                result = train_roi_regressor(config, manifest, split, out_dir)
            else:
                raise ConfigError(f"{stage.value} is not a training stage")
        FileManager(out_dir).record_inputs(
            stage.value,
            self._inputs(
                manifest=manifest_path, split=split_path, pretrained=pretrained
            ),
            result.config_hash,
            config.model_dump(mode="json"),
        )
        return result

    def pretrain(self, manifest_path, split_path, out_dir, epochs=None) -> StageResult:
        return self._train(Stage.PRETRAIN, manifest_path, split_path, out_dir, epochs)

    def finetune(
        self, manifest_path, split_path, pretrained, out_dir, epochs=None
    ) -> StageResult:
        return self._train(
            Stage.FINETUNE, manifest_path, split_path, out_dir, epochs, pretrained
        )

    def train_scratch(
        self, manifest_path, split_path, out_dir, epochs=None
    ) -> StageResult:
        return self._train(Stage.SCRATCH, manifest_path, split_path, out_dir, epochs)

    def train_roi(self, manifest_path, split_path, out_dir, epochs=None) -> StageResult:
        return self._train(Stage.ROI, manifest_path, split_path, out_dir, epochs)

    def probe(
        self,
        checkpoint: PathLike,
        manifest_path: PathLike,
        split_path: PathLike,
        out_dir: PathLike,
        epochs: Optional[int] = None,
    ) -> ProbeResult:
        meta, tensors = load_checkpoint(
            checkpoint,
            expected_stages={Stage.PRETRAIN.value},
            expected_preset=self.preset.value if self.preset else None,
        )
        config = self.stage_config(Stage.PROBE, epochs, preset=meta.preset)
        encoder = DiscEncoder(classifier_encoder_spec(config))
        restore_module(encoder, tensors, "encoder")
        manifest = self.load_valid_manifest(manifest_path)
        split = self.load_audited_split(split_path, manifest)
        with run_log(out_dir):
            result = linear_probe(encoder, manifest, split, config, out_dir)
        save_json(
            Path(out_dir) / "metrics.json",
            {
                "probe": result.metrics,
                "majority_baseline": result.baseline,
                "best_epoch": result.best_epoch,
            },
        )
        FileManager(out_dir).record_inputs(
            "probe",
            self._inputs(
                checkpoint=checkpoint, manifest=manifest_path, split=split_path
            ),
            config_hash(config),
            config.model_dump(mode="json"),
        )
        return result

    # evaluation and reporting

    def evaluate(
        self,
        checkpoint: PathLike,
        manifest_path: PathLike,
        split_path: PathLike,
        out_dir: PathLike,
        partition: Union[Partition, str] = Partition.VAL,
        use_predicted_coords: bool = False,
        roi_checkpoint: Optional[PathLike] = None,
        slices_per_disc: Optional[int] = None,
        extra_metrics: Optional[Dict[str, Any]] = None,
    ) -> EvaluationResult:
        manifest = self.load_valid_manifest(manifest_path)
        split = self.load_audited_split(split_path, manifest)
        result = evaluate_checkpoint(
            checkpoint,
            manifest,
            split,
            partition,
            use_predicted_coords,
            roi_checkpoint,
            slices_per_disc,
        )
        if extra_metrics:
            result.metrics.update(extra_metrics)
        result.save(out_dir)
        FileManager(out_dir).record_inputs(
            "evaluate",
            self._inputs(
                checkpoint=checkpoint,
                manifest=manifest_path,
                split=split_path,
                roi_checkpoint=roi_checkpoint,
            ),
            result.metrics.get("config_hash"),
            {
                "partition": Partition(partition).value,
                "use_predicted_coords": use_predicted_coords,
                "slices_per_disc": result.metrics["slices_per_disc"],
            },
        )
        return result

    def report(
        self, run_dir: PathLike, out_dir: Optional[PathLike] = None
    ) -> ReportBundle:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory not found: {run_dir}")
        histories: Dict[str, TrainHistory] = {}
        for stage, name in STAGE_DIRS.items():
            path = run_dir / name / HISTORY_FILE
            if path.is_file():
                histories[name] = TrainHistory.load_csv(path, stage=stage.value)

        metrics: Dict[str, Any] = {}
        overlays = []
        evaluation_dir = run_dir / "evaluation"
        if (evaluation_dir / "metrics.json").is_file():
            metrics = load_json(evaluation_dir / "metrics.json")
            overlays = self._overlays_from(evaluation_dir)
        if not histories and not metrics:
            raise DataError(
                f"{run_dir} holds no stage histories and no evaluation metrics"
            )
        report_dir = out_dir or run_dir / "report"
        bundle = emit_report(histories, metrics, report_dir, overlays)
        FileManager(bundle.out_dir).record_inputs(
            "report", {"run": run_dir}, metrics.get("config_hash")
        )
        return bundle

    def _overlays_from(self, evaluation_dir: Path) -> List[OverlayCase]:
        predictions_path = evaluation_dir / "predictions.csv"
        inputs_path = evaluation_dir / FileManager.INPUTS_FILE
        if not predictions_path.is_file() or not inputs_path.is_file():
            return []
        frame = pd.read_csv(
            predictions_path, dtype={"patient_id": str, "series_id": str}
        )
        if "x_pred" not in frame.columns:
            return []
        manifest_path = load_json(inputs_path)["inputs"].get("manifest", {}).get("path")
        if not manifest_path or not Path(manifest_path).is_file():
            self.logger.warning(
                "⚠️ Manifest of the evaluation run not found; "
                "skipping localization overlays"
            )
            return []
        manifest = load_manifest(manifest_path)
        centers = {}
        for r in frame.itertuples(index=False):
            key = DiscKey(patient_id=r.patient_id, series_id=r.series_id, level=r.level)
            centers[key] = (float(r.x_pred), float(r.y_pred))
        return overlay_cases(manifest, centers)

    # everything

    def run_all(
        self,
        out_dir: PathLike,
        patients: int = 200,
        image_size: Optional[int] = None,
        slices: Optional[int] = None,
    ) -> Dict[str, Any]:
        """Phantom -> ROIs -> split -> pretrain -> finetune / probe / scratch
        -> ROI regressor -> evaluation -> report"""
        out = Path(out_dir)
        preset = self.preset.value if self.preset else "standard"
        self.logger.info(f"🚀 run-all into {out} (seed {self.seed}, preset {preset})")
        self.generate_phantom(out / "phantom", patients, image_size, slices)
        manifest_path = out / "phantom" / "manifest.csv"
        self.preprocess(manifest_path, out / "rois")
        split_path = self.make_split(manifest_path, out / "split.csv")

        pretrained = self.pretrain(manifest_path, split_path, out / "pretrain")
        finetuned = self.finetune(
            manifest_path, split_path, pretrained.best_checkpoint, out / "finetune"
        )
        probed = self.probe(
            pretrained.best_checkpoint, manifest_path, split_path, out / "probe"
        )
        scratch = self.train_scratch(manifest_path, split_path, out / "scratch")
        roi = self.train_roi(manifest_path, split_path, out / "roi")

        checkpoints = {
            Stage.SCRATCH: scratch.best_checkpoint,
            Stage.PROBE: probed.checkpoint,
            Stage.FINETUNE: finetuned.best_checkpoint,
        }
        comparison: Dict[str, Any] = {}
        manifest = self.load_valid_manifest(manifest_path)
        split = self.load_audited_split(split_path, manifest)
        for name, stage in COMPARISON_ROWS:
            if stage == Stage.FINETUNE:
                continue
            metrics = evaluate_checkpoint(checkpoints[stage], manifest, split).metrics
            comparison[name] = metrics["ground_truth_coords"]
        evaluation = self.evaluate(
            finetuned.best_checkpoint,
            manifest_path,
            split_path,
            out / "evaluation",
            use_predicted_coords=True,
            roi_checkpoint=roi.best_checkpoint,
        )
        comparison["fine_tuned"] = evaluation.metrics["ground_truth_coords"]
        comparison["majority"] = probed.baseline
        evaluation.metrics["comparison"] = comparison
        evaluation.metrics["best_epochs"] = {
            "pretrain": pretrained.best_epoch,
            "finetune": finetuned.best_epoch,
            "probe": probed.best_epoch,
            "scratch": scratch.best_epoch,
            "roi": roi.best_epoch,
        }
        save_json(out / "evaluation" / "metrics.json", evaluation.metrics)
        self.report(out)
        self.logger.info("🎉 run-all complete")
        return evaluation.metrics
