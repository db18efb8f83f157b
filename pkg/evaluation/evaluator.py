"""
Checkpoint evaluation on one partition.

Crops use the annotated disc centers unless predicted coordinates are
requested, in which case a trained ROI regressor supplies the centers and both
sets of metrics are reported.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from torch.utils.data import DataLoader

from config.run_config import CLASSIFIER_STAGES, RunConfig, Stage
from data.datasets import RoiBank, StackedSliceDataset, build_roi_bank
from data.types import DatasetManifest, DiscKey, Partition, SplitAssignment
from evaluation.metrics import (
    classification_summary,
    confusion_matrix,
    coordinate_rmse,
    euclidean_rmse,
    majority_baseline,
)
from models.checkpoint import CheckpointMeta, load_checkpoint, restore_module
from models.encoder import DiscEncoder
from models.heads import DiscClassifier, predict_grades
from models.regressor import RoiRegressor
from training.trainer import (
    classifier_encoder_spec,
    collect_logits,
    regressor_encoder_spec,
)
from utils.exceptions import ConfigError, DataError
from utils.file_manager import save_json

logger = logging.getLogger(__name__)

Center = Tuple[float, float]


@dataclass
class EvaluationResult:
    metrics: Dict[str, object]
    predictions: pd.DataFrame
    predicted_centers: Dict[DiscKey, Center] = field(default_factory=dict)

    def save(self, out_dir: Union[str, Path]) -> Path:
        """metrics.json, confusion.csv and predictions.csv under out_dir"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_json(out_dir / "metrics.json", self.metrics)
        confusion = self.metrics["ground_truth_coords"]["confusion"]
        frame = pd.DataFrame(
            confusion,
            index=["true_normal", "true_moderate", "true_severe"],
            columns=["pred_normal", "pred_moderate", "pred_severe"],
        )
        frame.to_csv(out_dir / "confusion.csv", lineterminator="\n")
        self.predictions.to_csv(
            out_dir / "predictions.csv",
            index=False,
            float_format="%.6f",
            lineterminator="\n",
        )
        return out_dir / "metrics.json"


def load_classifier(
    checkpoint: Union[str, Path]
) -> Tuple[DiscClassifier, RunConfig, CheckpointMeta]:
    stages = {s.value for s in CLASSIFIER_STAGES}
    meta, tensors = load_checkpoint(checkpoint, expected_stages=stages)
    config = RunConfig.model_validate(meta.config)
    classifier = DiscClassifier(DiscEncoder(classifier_encoder_spec(config)))
    restore_module(classifier, tensors, "classifier")
    classifier.eval()
    return classifier, config, meta


def load_regressor(checkpoint: Union[str, Path]) -> Tuple[RoiRegressor, RunConfig]:
    meta, tensors = load_checkpoint(checkpoint, expected_stages={Stage.ROI.value})
    config = RunConfig.model_validate(meta.config)
    # weights come from the checkpoint; never fetch ImageNet weights here
    regressor_config = config.regressor.model_copy(
        update={"pretrained_backbone": False}
    )
    regressor = RoiRegressor(regressor_encoder_spec(config), regressor_config)
    restore_module(regressor, tensors, "regressor")
    regressor.eval()
    return regressor, config


@torch.no_grad()
def predict_centers(
    regressor: RoiRegressor,
    manifest: DatasetManifest,
    keys: Sequence[DiscKey],
    config: RunConfig,
) -> Tuple[Dict[DiscKey, Center], Dict[DiscKey, Center]]:
    """Predicted and annotated disc centers in source-slice pixels."""
    regressor.eval()
    dataset = StackedSliceDataset(manifest, keys, config.preprocess)
    predicted: Dict[DiscKey, Center] = {}
    truth: Dict[DiscKey, Center] = {}
    position = 0
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=False)
    for x, levels, target, size in loader:
        pixels = (regressor(x, levels).double() * size.double()).tolist()
        truths = (target.double() * size.double()).tolist()
        for px, tx in zip(pixels, truths):
            key = dataset.samples[position].key
            predicted[key] = (px[0], px[1])
            truth[key] = (tx[0], tx[1])
            position += 1
    return predicted, truth


def _predict(
    classifier: DiscClassifier, bank: RoiBank, batch_size: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    logits = collect_logits(classifier, bank, batch_size, torch.device("cpu"))
    return logits, predict_grades(logits)


def evaluate_checkpoint(
    checkpoint: Union[str, Path],
    manifest: DatasetManifest,
    split: SplitAssignment,
    partition: Union[Partition, str] = Partition.VAL,
    use_predicted_coords: bool = False,
    roi_checkpoint: Optional[Union[str, Path]] = None,
    slices_per_disc: Optional[int] = None,
) -> EvaluationResult:
    partition = Partition(partition)
    classifier, config, meta = load_classifier(checkpoint)
    keys = split.keys_in(partition)
    if not keys:
        raise DataError(f"the {partition.value} partition is empty")
    slices = slices_per_disc or config.eval_slices_per_disc
    if slices % 2 == 0:
        raise ConfigError(f"slices per disc must be odd, got {slices}")
    if use_predicted_coords and roi_checkpoint is None:
        raise ConfigError(
            "predicted coordinates need an ROI regressor checkpoint (--roi-ckpt)"
        )

    logger.info(
        f"🩺 Evaluating {meta.stage} checkpoint (epoch {meta.epoch}) "
        f"on {len(keys)} {partition.value} discs"
    )
    bank = build_roi_bank(manifest, keys, config.preprocess, slices_per_disc=slices)
    logits, preds = _predict(classifier, bank, config.batch_size)
    probs = torch.softmax(logits, dim=1)

    grades = manifest.grades()
    train_labels = [int(grades[k]) for k in split.keys_in(Partition.TRAIN)]
    confusion = confusion_matrix(preds.numpy(), bank.labels)
    baseline = majority_baseline(train_labels, bank.labels) if train_labels else None
    metrics: Dict[str, object] = {
        "stage": meta.stage,
        "preset": meta.preset,
        "checkpoint_epoch": meta.epoch,
        "config_hash": meta.config_hash,
        "partition": partition.value,
        "slices_per_disc": slices,
        "tie_rule": "argmax ties resolve to the less severe grade",
        "ground_truth_coords": classification_summary(confusion),
        "majority_baseline": baseline,
        "predicted_coords": None,
        "localization": None,
    }
    predictions = pd.DataFrame(
        {
            "patient_id": [k.patient_id for k in keys],
            "series_id": [k.series_id for k in keys],
            "level": [k.level.value for k in keys],
            "label": bank.labels,
            "pred": preds.numpy(),
            "p_normal": probs[:, 0].numpy(),
            "p_moderate": probs[:, 1].numpy(),
            "p_severe": probs[:, 2].numpy(),
        }
    )

    centers: Dict[DiscKey, Center] = {}
    if use_predicted_coords:
        regressor, roi_config = load_regressor(roi_checkpoint)
        centers, truth = predict_centers(regressor, manifest, keys, roi_config)
        ordered_pred = [centers[k] for k in keys]
        ordered_truth = [truth[k] for k in keys]
        metrics["localization"] = {
            "rmse_px": coordinate_rmse(ordered_pred, ordered_truth),
            "euclidean_rmse_px": euclidean_rmse(ordered_pred, ordered_truth),
            "n": len(keys),
        }
        predicted_bank = build_roi_bank(
            manifest, keys, config.preprocess, slices_per_disc=slices, centers=centers
        )
        _, predicted_preds = _predict(classifier, predicted_bank, config.batch_size)
        metrics["predicted_coords"] = classification_summary(
            confusion_matrix(predicted_preds.numpy(), predicted_bank.labels)
        )
        predictions["pred_with_predicted_coords"] = predicted_preds.numpy()
        predictions["x_pred"] = [centers[k][0] for k in keys]
        predictions["y_pred"] = [centers[k][1] for k in keys]

    summary = metrics["ground_truth_coords"]
    sn = summary["severe_to_normal"]
    logger.info(
        f"✅ Balanced accuracy {summary['balanced_accuracy']:.4f}, "
        f"severe-to-normal {sn['numerator']}/{sn['denominator']}"
    )
    return EvaluationResult(
        metrics=metrics, predictions=predictions, predicted_centers=centers
    )
