"""
Linear probe: a fresh linear grade classifier on top of a frozen pretrained
encoder.

Features are computed once with the encoder in eval mode, so the encoder
(weights and BatchNorm statistics) is never touched by the probe.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset

from config.run_config import RunConfig, Stage, config_hash
from data.datasets import build_roi_bank
from data.types import DatasetManifest, Partition, SplitAssignment
from evaluation.metrics import (
    classification_summary,
    confusion_matrix,
    majority_baseline,
    per_class_recall,
)
from models.checkpoint import CheckpointMeta, save_checkpoint
from models.encoder import FEATURE_DIM, DiscEncoder
from models.finetune import build_optimizer
from models.heads import DiscClassifier, predict_grades
from training.history import (
    EpochRecord,
    TrainHistory,
    is_improvement,
    select_best_checkpoint,
)
from training.losses import weighted_focal_loss
from training.trainer import BEST_CHECKPOINT, HISTORY_FILE, LrController
from utils.exceptions import ConfigError
from utils.seeding import seed_everything

logger = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    head: nn.Linear
    history: TrainHistory
    best_epoch: int
    metrics: Dict[str, object]
    baseline: Dict[str, object]
    checkpoint: Optional[Path] = None


@torch.no_grad()
def extract_features(
    encoder: DiscEncoder, patches: torch.Tensor, batch_size: int
) -> torch.Tensor:
    encoder.eval()
    return torch.cat([encoder(chunk) for chunk in torch.split(patches, batch_size)])


def linear_probe(
    encoder: DiscEncoder,
    manifest: DatasetManifest,
    split: SplitAssignment,
    config: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> ProbeResult:
    """Train only a Linear(512, 3) head with the focal loss.

    Reports the validation metrics of its best epoch.
    """
    if config.stage != Stage.PROBE:
        raise ConfigError(
            f"linear probing needs a probe config, got stage {config.stage.value!r}"
        )
    train_keys, val_keys = split.keys_in(Partition.TRAIN), split.keys_in(Partition.VAL)
    if not train_keys or not val_keys:
        raise ConfigError("linear probe needs non-empty train and val partitions")
    generator = seed_everything(config.seed)

    for param in encoder.parameters():
        param.requires_grad_(False)
    train_bank = build_roi_bank(manifest, train_keys, config.preprocess)
    val_bank = build_roi_bank(manifest, val_keys, config.preprocess)
    batch_size = config.batch_size
    train_patches = torch.from_numpy(train_bank.patches)
    train_x = extract_features(encoder, train_patches, batch_size)
    val_x = extract_features(encoder, torch.from_numpy(val_bank.patches), batch_size)
    train_y = torch.from_numpy(train_bank.labels)
    val_y = torch.from_numpy(val_bank.labels)

    head = nn.Linear(FEATURE_DIM, 3)
    group = {"name": "head", "params": list(head.parameters())}
    group["lr"] = config.optimizer.lr
    optimizer = build_optimizer([group], config.optimizer)
    lr_control = LrController(optimizer, config.scheduler, config.epochs)
    loader = DataLoader(
        TensorDataset(train_x, train_y),
        batch_size=batch_size,
        shuffle=True,
        generator=generator,
    )

    history = TrainHistory(stage=Stage.PROBE.value)
    best_state, best_score = None, None
    logger.info(f"🔎 Linear probe on {len(train_keys)} frozen-encoder features")
    for epoch_index in range(config.epochs):
        rates = lr_control.begin_epoch(epoch_index)
        head.train()
        total, seen = 0.0, 0
        for x, y in loader:
            loss = weighted_focal_loss(head(x), y, config.focal)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * x.shape[0]
            seen += x.shape[0]

        head.eval()
        with torch.no_grad():
            logits = head(val_x)
        cm = confusion_matrix(predict_grades(logits).numpy(), val_bank.labels)
        recalls = per_class_recall(cm)
        summary = classification_summary(cm)
        record = EpochRecord(
            epoch=epoch_index + 1,
            train_loss=total / seen,
            val_loss=float(weighted_focal_loss(logits, val_y, config.focal)),
            lr=rates[0],
            val_balanced_accuracy=summary["balanced_accuracy"],
            val_recall_normal=float(recalls[0]),
            val_recall_moderate=float(recalls[1]),
            val_recall_severe=float(recalls[2]),
        )
        history.append(record)
        lr_control.end_epoch(record.val_balanced_accuracy)
        score = record.val_balanced_accuracy
        if is_improvement(score, best_score, "val_balanced_accuracy"):
            best_score = score
            best_state = {k: v.clone() for k, v in head.state_dict().items()}

    if best_state is not None:
        head.load_state_dict(best_state)
    best_epoch = select_best_checkpoint(history, "val_balanced_accuracy")
    with torch.no_grad():
        best_preds = predict_grades(head(val_x)).numpy()
    metrics = classification_summary(confusion_matrix(best_preds, val_bank.labels))
    baseline = majority_baseline(train_bank.labels, val_bank.labels)
    logger.info(
        f"✅ Probe best epoch {best_epoch}: "
        f"balanced accuracy {metrics['balanced_accuracy']:.4f} "
        f"(majority baseline {baseline['balanced_accuracy']:.4f})"
    )

    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        classifier = DiscClassifier(encoder)
        classifier.head.load_state_dict(head.state_dict())
        meta = CheckpointMeta(
            stage=Stage.PROBE.value,
            preset=config.preset.value,
            epoch=best_epoch,
            config_hash=config_hash(config),
            metrics={"val_balanced_accuracy": metrics["balanced_accuracy"]},
            config=config.model_dump(mode="json"),
        )
        checkpoint = save_checkpoint(
            out_dir / BEST_CHECKPOINT, {"classifier": classifier}, meta
        )
        history.save_csv(out_dir / HISTORY_FILE)
    return ProbeResult(
        head=head,
        history=history,
        best_epoch=best_epoch,
        metrics=metrics,
        baseline=baseline,
        checkpoint=checkpoint,
    )
