"""
Training stages: contrastive pretraining, differential fine-tuning, the
from-scratch baseline and the ROI coordinate regressor.

Each stage writes ``best.safetensors``, ``last.safetensors`` and
``history.csv`` into its output directory and returns a StageResult.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from config.run_config import RunConfig, SchedulerConfig, Stage, config_hash
from config.settings import settings
from data.datasets import (
    ContrastiveViewDataset,
    DiscSetDataset,
    RoiBank,
    StackedSliceDataset,
    build_roi_bank,
)
from data.types import DatasetManifest, Partition, SplitAssignment
from evaluation.metrics import (
    balanced_accuracy,
    confusion_matrix,
    coordinate_rmse,
    per_class_recall,
)
from models.checkpoint import (
    CheckpointMeta,
    load_checkpoint,
    restore_module,
    save_checkpoint,
)
from models.encoder import DiscEncoder, EncoderSpec
from models.finetune import (
    base_lrs,
    build_finetune_param_groups,
    build_optimizer,
    hold_frozen_batchnorm,
)
from models.heads import DiscClassifier, ProjectionHead, predict_grades
from models.regressor import RoiRegressor
from training.history import (
    EpochRecord,
    TrainHistory,
    is_improvement,
    select_best_checkpoint,
)
from training.losses import multi_positive_ntxent, smooth_l1, weighted_focal_loss
from training.schedulers import PlateauState, cosine_lr, plateau_step, set_group_lrs
from utils.exceptions import ConfigError, NumericError
from utils.seeding import seed_everything

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.safetensors"
LAST_CHECKPOINT = "last.safetensors"
HISTORY_FILE = "history.csv"

PathLike = Union[str, Path]


def clip_gradient_norm(gradients: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm.

    Returns the factor used.
    """
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    grads = [g for g in gradients if g is not None]
    if not grads:
        return 1.0
    total = math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads))
    if not math.isfinite(total):
        raise NumericError(f"non-finite gradient norm {total}")
    if total <= max_norm:
        return 1.0
    factor = max_norm / total
    for g in grads:
        g.mul_(factor)
    return factor


def clip_parameter_gradients(
    parameters: Iterable[nn.Parameter], max_norm: float
) -> float:
    return clip_gradient_norm((p.grad for p in parameters), max_norm)


@dataclass
class StageResult:
    stage: str
    out_dir: Path
    history: TrainHistory
    best_epoch: int
    best_checkpoint: Path
    last_checkpoint: Path
    config_hash: str
    best_metrics: Dict[str, Any] = field(default_factory=dict)


class LrController:
    """Sets each param group's rate per epoch from a cosine schedule or the
    plateau state machine."""

    def __init__(
        self, optimizer: torch.optim.Optimizer, scheduler: SchedulerConfig, epochs: int
    ):
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.epochs = epochs
        self.base = base_lrs(optimizer)
        self.state = PlateauState()

    def begin_epoch(self, epoch_index: int) -> List[float]:
        if self.scheduler.name == "cosine":
            eta_min = self.scheduler.eta_min
            rates = [cosine_lr(b, epoch_index, self.epochs, eta_min) for b in self.base]
        else:
            rates = [self.state.lr(b) for b in self.base]
        set_group_lrs(self.optimizer, rates)
        return rates

    def end_epoch(self, metric: float) -> None:
        if self.scheduler.name != "plateau":
            return
        before = self.state.num_reductions
        self.state = plateau_step(
            self.state,
            metric,
            mode=self.scheduler.mode,
            patience=self.scheduler.patience,
            factor=self.scheduler.factor,
            min_delta=self.scheduler.min_delta,
        )
        if self.state.num_reductions > before:
            logger.info(
                f"📉 Plateau: learning rates scaled to {self.state.scale:g} x base"
            )


def _partition_keys(split: SplitAssignment, partition: Partition, stage: str):
    keys = split.keys_in(partition)
    if not keys:
        raise ConfigError(f"{stage}: the {partition.value} partition is empty")
    return keys


def classifier_encoder_spec(config: RunConfig) -> EncoderSpec:
    return EncoderSpec.for_preset(config.preset, config.preprocess.model_input_size)


def regressor_encoder_spec(config: RunConfig) -> EncoderSpec:
    return EncoderSpec.for_preset(
        config.preset, config.preprocess.regression_input_size, input_channels=3
    )


@torch.no_grad()
def collect_logits(
    classifier: DiscClassifier, bank: RoiBank, batch_size: int, device: torch.device
) -> torch.Tensor:
    """Eval-mode logits for every disc set in the bank, in bank order."""
    classifier.eval()
    loader = DataLoader(DiscSetDataset(bank), batch_size=batch_size, shuffle=False)
    return torch.cat([classifier(x.to(device)).cpu() for x, _ in loader])


class DiscGradeTrainer:
    """Runs one training stage of the pipeline on a manifest and split."""

    def __init__(
        self, config: RunConfig, out_dir: PathLike, device: Optional[str] = None
    ):
        self.logger = logging.getLogger(__name__)
        self.settings = settings
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.device = torch.device(device or self.settings.device)
        self.config_hash = config_hash(config)
        # drop the best checkpoint of an earlier run in this directory
        stale = self.out_dir / BEST_CHECKPOINT
        if stale.exists():
            stale.unlink()

    # shared plumbing

    def _loader(
        self, dataset, shuffle: bool, generator: Optional[torch.Generator] = None
    ) -> DataLoader:
        return DataLoader(
            dataset,
            batch_size=self.config.batch_size,
            shuffle=shuffle,
            generator=generator,
            num_workers=self.config.num_workers,
        )

    def _meta(self, record: EpochRecord) -> CheckpointMeta:
        metrics = {k: v for k, v in vars(record).items() if v is not None}
        return CheckpointMeta(
            stage=self.config.stage.value,
            preset=self.config.preset.value,
            epoch=record.epoch,
            config_hash=self.config_hash,
            metrics=metrics,
            config=self.config.model_dump(mode="json"),
        )

    def _step(
        self,
        loss: torch.Tensor,
        optimizer: torch.optim.Optimizer,
        parameters: List[nn.Parameter],
    ) -> float:
        if not torch.isfinite(loss):
            raise NumericError(
                f"{self.config.stage.value}: non-finite training loss {loss.item()}"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        scale = 1.0
        if self.config.clip_max_norm is not None:
            scale = clip_parameter_gradients(parameters, self.config.clip_max_norm)
        optimizer.step()
        return scale

    def _save_best(self, modules: Dict[str, nn.Module], record: EpochRecord) -> None:
        save_checkpoint(self.out_dir / BEST_CHECKPOINT, modules, self._meta(record))

    def _finish(
        self, history: TrainHistory, modules: Dict[str, nn.Module], last: EpochRecord
    ) -> StageResult:
        criterion = self.config.selection_criterion
        best_path = self.out_dir / BEST_CHECKPOINT
        last_path = save_checkpoint(
            self.out_dir / LAST_CHECKPOINT, modules, self._meta(last)
        )
        if not best_path.exists():
            save_checkpoint(best_path, modules, self._meta(last))
        history.save_csv(self.out_dir / HISTORY_FILE)
        best_epoch = select_best_checkpoint(history, criterion)
        epochs = [r.epoch for r in history.records]
        best_record = history.records[epochs.index(best_epoch)]
        self.logger.info(
            f"✅ {self.config.stage.value} finished: best epoch {best_epoch} "
            f"({criterion}={getattr(best_record, criterion)})"
        )
        return StageResult(
            stage=self.config.stage.value,
            out_dir=self.out_dir,
            history=history,
            best_epoch=best_epoch,
            best_checkpoint=best_path,
            last_checkpoint=last_path,
            config_hash=self.config_hash,
            best_metrics={k: v for k, v in vars(best_record).items() if v is not None},
        )

    def _log_epoch(self, record: EpochRecord) -> None:
        parts = [
            f"train_loss={record.train_loss:.4f}",
            f"val_loss={record.val_loss:.4f}",
            f"lr={record.lr:.3g}",
        ]
        if record.val_balanced_accuracy is not None:
            parts.append(f"val_bal_acc={record.val_balanced_accuracy:.4f}")
        if record.val_rmse is not None:
            parts.append(f"val_rmse={record.val_rmse:.2f}px")
        self.logger.info(
            f"📈 [{self.config.stage.value}] "
            f"epoch {record.epoch}/{self.config.epochs} " + " ".join(parts)
        )

    # contrastive pretraining

    def pretrain_contrastive(
        self, manifest: DatasetManifest, split: SplitAssignment
    ) -> StageResult:
        config = self.config
        if config.stage != Stage.PRETRAIN:
            raise ConfigError(
                f"pretraining needs a pretrain config, got stage {config.stage.value!r}"
            )
        train_keys = _partition_keys(split, Partition.TRAIN, "pretrain")
        val_keys = _partition_keys(split, Partition.VAL, "pretrain")
        generator = seed_everything(config.seed, self.settings.num_threads)

        self.logger.info(
            f"🧠 Contrastive pretraining on {len(train_keys)} discs "
            f"x {config.views} views"
        )
        train_bank = build_roi_bank(manifest, train_keys, config.preprocess)
        val_bank = build_roi_bank(manifest, val_keys, config.preprocess)
        train_set = ContrastiveViewDataset(
            train_bank, config.augment, config.views, seed=config.seed
        )
        # validation views never change across epochs
        val_set = ContrastiveViewDataset(
            val_bank, config.augment, config.views, seed=config.seed + 1
        )

        encoder = DiscEncoder(classifier_encoder_spec(config)).to(self.device)
        projection = ProjectionHead(
            hidden_dim=config.projection_hidden, out_dim=config.projection_dim
        ).to(self.device)
        parameters = list(encoder.parameters()) + list(projection.parameters())
        optimizer = build_optimizer(
            [{"name": "all", "params": parameters, "lr": config.optimizer.lr}],
            config.optimizer,
        )
        lr_control = LrController(optimizer, config.scheduler, config.epochs)
        modules = {"encoder": encoder, "projection": projection}

        def contrastive_loss(
            views: torch.Tensor, group_ids: torch.Tensor
        ) -> torch.Tensor:
            batch, views_per_disc = views.shape[:2]
            x = views.reshape(batch * views_per_disc, *views.shape[2:]).to(self.device)
            groups = group_ids.repeat_interleave(views_per_disc).to(self.device)
            return multi_positive_ntxent(
                projection(encoder(x)), groups, config.temperature
            )

        history = TrainHistory(stage=config.stage.value)
        best: Optional[float] = None
        record = None
        for epoch_index in range(config.epochs):
            rates = lr_control.begin_epoch(epoch_index)
            train_set.set_epoch(epoch_index)
            encoder.train()
            projection.train()
            total, seen, scales = 0.0, 0, []
            train_loader = self._loader(train_set, shuffle=True, generator=generator)
            for views, group_ids in train_loader:
                loss = contrastive_loss(views, group_ids)
                scales.append(self._step(loss, optimizer, parameters))
                total += float(loss.item()) * views.shape[0]
                seen += views.shape[0]

            encoder.eval()
            projection.eval()
            val_total, val_seen = 0.0, 0
            with torch.no_grad():
                for views, group_ids in self._loader(val_set, shuffle=False):
                    val_loss = contrastive_loss(views, group_ids)
                    val_total += float(val_loss.item()) * views.shape[0]
                    val_seen += views.shape[0]

            record = EpochRecord(
                epoch=epoch_index + 1,
                train_loss=total / seen,
                val_loss=val_total / val_seen,
                lr=rates[0],
                grad_scale=float(np.min(scales)) if scales else None,
            )
            history.append(record)
            self._log_epoch(record)
            lr_control.end_epoch(record.val_loss)
            if is_improvement(record.val_loss, best, "val_loss"):
                best = record.val_loss
                self._save_best(modules, record)
        return self._finish(history, modules, record)

    # supervised classification

    def finetune_classifier(
        self,
        manifest: DatasetManifest,
        split: SplitAssignment,
        pretrained_checkpoint: PathLike,
    ) -> StageResult:
        config = self.config
        if config.stage != Stage.FINETUNE:
            raise ConfigError(
                f"fine-tuning needs a finetune config, got stage {config.stage.value!r}"
            )
        _, tensors = load_checkpoint(
            pretrained_checkpoint,
            expected_stages={Stage.PRETRAIN.value},
            expected_preset=config.preset.value,
        )
        seed_everything(config.seed, self.settings.num_threads)
        encoder = DiscEncoder(classifier_encoder_spec(config))
        restore_module(encoder, tensors, "encoder")
        self.logger.info(f"🔧 Fine-tuning from {pretrained_checkpoint}")
        return self._fit_classifier(manifest, split, encoder)

    def train_scratch_classifier(
        self, manifest: DatasetManifest, split: SplitAssignment
    ) -> StageResult:
        config = self.config
        if config.stage != Stage.SCRATCH:
            raise ConfigError(
                "scratch training needs a scratch config, "
                f"got stage {config.stage.value!r}"
            )
        seed_everything(config.seed, self.settings.num_threads)
        self.logger.info("🌱 Training the classifier from random initialization")
        encoder = DiscEncoder(classifier_encoder_spec(config))
        return self._fit_classifier(manifest, split, encoder)

    def _fit_classifier(
        self, manifest: DatasetManifest, split: SplitAssignment, encoder: DiscEncoder
    ) -> StageResult:
        config = self.config
        train_keys = _partition_keys(split, Partition.TRAIN, config.stage.value)
        val_keys = _partition_keys(split, Partition.VAL, config.stage.value)
        generator = torch.Generator()
        generator.manual_seed(config.seed)

        train_bank = build_roi_bank(manifest, train_keys, config.preprocess)
        val_bank = build_roi_bank(manifest, val_keys, config.preprocess)

        classifier = DiscClassifier(encoder).to(self.device)
        frozen = tuple(config.frozen_stages)
        groups = build_finetune_param_groups(
            classifier.encoder,
            classifier.head,
            backbone_lr=config.optimizer.lr,
            head_lr=config.optimizer.head_lr or config.optimizer.lr,
            frozen=frozen,
        )
        optimizer = build_optimizer(groups, config.optimizer)
        parameters = [p for g in groups for p in g["params"]]
        lr_control = LrController(optimizer, config.scheduler, config.epochs)
        modules = {"classifier": classifier}
        val_labels = torch.from_numpy(val_bank.labels)
        train_set = DiscSetDataset(train_bank)

        history = TrainHistory(stage=config.stage.value)
        best: Optional[float] = None
        record = None
        for epoch_index in range(config.epochs):
            rates = lr_control.begin_epoch(epoch_index)
            classifier.train()
            hold_frozen_batchnorm(classifier.encoder, frozen)
            total, seen, scales = 0.0, 0, []
            for x, y in self._loader(train_set, shuffle=True, generator=generator):
                logits = classifier(x.to(self.device))
                loss = weighted_focal_loss(logits, y.to(self.device), config.focal)
                scales.append(self._step(loss, optimizer, parameters))
                total += float(loss.item()) * x.shape[0]
                seen += x.shape[0]

            logits = collect_logits(
                classifier, val_bank, config.batch_size, self.device
            )
            val_loss = float(weighted_focal_loss(logits, val_labels, config.focal))
            cm = confusion_matrix(predict_grades(logits).numpy(), val_bank.labels)
            recalls = per_class_recall(cm)
            record = EpochRecord(
                epoch=epoch_index + 1,
                train_loss=total / seen,
                val_loss=val_loss,
                lr=rates[0],
                val_balanced_accuracy=balanced_accuracy(cm),
                val_recall_normal=float(recalls[0]),
                val_recall_moderate=float(recalls[1]),
                val_recall_severe=float(recalls[2]),
                grad_scale=float(np.min(scales)) if scales else None,
            )
            history.append(record)
            self._log_epoch(record)
            lr_control.end_epoch(record.val_balanced_accuracy)
            score = record.val_balanced_accuracy
            if is_improvement(score, best, "val_balanced_accuracy"):
                best = score
                self._save_best(modules, record)
        return self._finish(history, modules, record)

    # coordinate regression

    def train_roi_regressor(
        self, manifest: DatasetManifest, split: SplitAssignment
    ) -> StageResult:
        config = self.config
        if config.stage != Stage.ROI:
            raise ConfigError(
                f"ROI regression needs a roi config, got stage {config.stage.value!r}"
            )
        train_keys = _partition_keys(split, Partition.TRAIN, "roi")
        val_keys = _partition_keys(split, Partition.VAL, "roi")
        generator = seed_everything(config.seed, self.settings.num_threads)

        self.logger.info(
            f"📍 Training the 2.5D disc-center regressor on {len(train_keys)} discs"
        )
        train_set = StackedSliceDataset(manifest, train_keys, config.preprocess)
        val_set = StackedSliceDataset(manifest, val_keys, config.preprocess)

        regressor = RoiRegressor(regressor_encoder_spec(config), config.regressor)
        regressor = regressor.to(self.device)
        parameters = list(regressor.parameters())
        optimizer = build_optimizer(
            [{"name": "all", "params": parameters, "lr": config.optimizer.lr}],
            config.optimizer,
        )
        lr_control = LrController(optimizer, config.scheduler, config.epochs)
        modules = {"regressor": regressor}

        history = TrainHistory(stage=config.stage.value)
        best: Optional[float] = None
        record = None
        for epoch_index in range(config.epochs):
            rates = lr_control.begin_epoch(epoch_index)
            regressor.train()
            total, seen, scales = 0.0, 0, []
            train_loader = self._loader(train_set, shuffle=True, generator=generator)
            for x, levels, target, _ in train_loader:
                pred = regressor(x.to(self.device), levels.to(self.device))
                loss = smooth_l1(pred, target.to(self.device), config.smooth_l1_beta)
                scales.append(self._step(loss, optimizer, parameters))
                total += float(loss.item()) * x.shape[0]
                seen += x.shape[0]

            val_loss, val_rmse = self._regression_validation(regressor, val_set)
            record = EpochRecord(
                epoch=epoch_index + 1,
                train_loss=total / seen,
                val_loss=val_loss,
                lr=rates[0],
                val_rmse=val_rmse,
                grad_scale=float(np.min(scales)) if scales else None,
            )
            history.append(record)
            self._log_epoch(record)
            lr_control.end_epoch(record.val_loss)
            if is_improvement(record.val_rmse, best, "val_rmse"):
                best = record.val_rmse
                self._save_best(modules, record)
        return self._finish(history, modules, record)

    @torch.no_grad()
    def _regression_validation(
        self, regressor: RoiRegressor, dataset: StackedSliceDataset
    ) -> Tuple[float, float]:
        regressor.eval()
        beta = self.config.smooth_l1_beta
        losses, preds_px, targets_px, weights = [], [], [], []
        for x, levels, target, size in self._loader(dataset, shuffle=False):
            pred = regressor(x.to(self.device), levels.to(self.device)).cpu()
            losses.append(float(smooth_l1(pred, target, beta)))
            weights.append(x.shape[0])
            preds_px.append((pred * size).double())
            targets_px.append((target.double() * size.double()))
        val_loss = float(np.average(losses, weights=weights))
        rmse = coordinate_rmse(
            torch.cat(preds_px).numpy(), torch.cat(targets_px).numpy()
        )
        return val_loss, rmse


def pretrain_contrastive(
    config: RunConfig,
    manifest: DatasetManifest,
    split: SplitAssignment,
    out_dir: PathLike,
) -> StageResult:
    return DiscGradeTrainer(config, out_dir).pretrain_contrastive(manifest, split)


def finetune_classifier(
    config: RunConfig,
    manifest: DatasetManifest,
    split: SplitAssignment,
    pretrained_checkpoint: PathLike,
    out_dir: PathLike,
) -> StageResult:
    trainer = DiscGradeTrainer(config, out_dir)
    return trainer.finetune_classifier(manifest, split, pretrained_checkpoint)


def train_scratch_classifier(
    config: RunConfig,
    manifest: DatasetManifest,
    split: SplitAssignment,
    out_dir: PathLike,
) -> StageResult:
    return DiscGradeTrainer(config, out_dir).train_scratch_classifier(manifest, split)


def train_roi_regressor(
    config: RunConfig,
    manifest: DatasetManifest,
    split: SplitAssignment,
    out_dir: PathLike,
) -> StageResult:
    return DiscGradeTrainer(config, out_dir).train_roi_regressor(manifest, split)
