"""
Classification and localization metrics over three severity grades.

Everything is derived from one 3 x 3 confusion matrix (rows = true grade,
columns = predicted grade) so the reported numbers stay mutually consistent.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from data.types import SeverityGrade
from utils.exceptions import DataError

logger = logging.getLogger(__name__)

GRADES = list(SeverityGrade)
EMA_FACTOR = 0.8


@dataclass(frozen=True)
class ConfusionMatrix3:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (3, 3) or (counts < 0).any():
            raise DataError(
                f"confusion matrix must be 3 x 3 non-negative, got {counts.tolist()}"
            )
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


def confusion_matrix(preds: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix3:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise DataError(f"{len(preds)} predictions for {len(labels)} labels")
    if preds.size == 0:
        raise DataError("cannot build a confusion matrix from zero samples")
    for name, values in (("prediction", preds), ("label", labels)):
        if ((values < 0) | (values > 2)).any():
            raise DataError(f"{name} outside 0..2: {sorted(set(values.tolist()))}")
    return ConfusionMatrix3(sk_confusion_matrix(labels, preds, labels=[0, 1, 2]))


def per_class_recall(cm: ConfusionMatrix3) -> np.ndarray:
    """Diagonal over row sums; a class with no true samples gets NaN."""
    rows = cm.row_sums()
    recalls = np.full(3, np.nan)
    present = rows > 0
    recalls[present] = np.diag(cm.counts)[present] / rows[present]
    for grade in GRADES:
        if not present[grade]:
            logger.warning(
                f"⚠️ No {grade.label} discs in this set; recall undefined "
                "and left out of balanced accuracy"
            )
    return recalls


def balanced_accuracy(cm: ConfusionMatrix3) -> float:
    recalls = per_class_recall(cm)
    defined = recalls[~np.isnan(recalls)]
    if defined.size == 0:
        return math.nan
    return float(defined.mean())


def accuracy(cm: ConfusionMatrix3) -> float:
    return float(np.trace(cm.counts) / cm.total) if cm.total else math.nan


@dataclass(frozen=True)
class SevereToNormal:
    numerator: int
    denominator: int

    @property
    def rate(self) -> float:
        return self.numerator / self.denominator if self.denominator else math.nan


def severe_to_normal(cm: ConfusionMatrix3) -> SevereToNormal:
    severe = cm.counts[SeverityGrade.SEVERE]
    return SevereToNormal(
        numerator=int(severe[SeverityGrade.NORMAL]), denominator=int(severe.sum())
    )


def severe_to_normal_rate(cm: ConfusionMatrix3) -> float:
    """Share of true-Severe discs predicted Normal; NaN when there are none."""
    return severe_to_normal(cm).rate


def _offsets(preds_px, targets_px) -> np.ndarray:
    preds = np.asarray(preds_px, dtype=np.float64).reshape(-1, 2)
    targets = np.asarray(targets_px, dtype=np.float64).reshape(-1, 2)
    if preds.shape != targets.shape:
        raise DataError(f"{len(preds)} predicted points for {len(targets)} targets")
    if preds.shape[0] == 0:
        raise DataError("no points to compare")
    return preds - targets


def coordinate_rmse(preds_px, targets_px) -> float:
    """sqrt(mean over points of (dx^2 + dy^2) / 2): per-coordinate RMSE in pixels."""
    d = _offsets(preds_px, targets_px)
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=1) / 2.0)))


def euclidean_rmse(preds_px, targets_px) -> float:
    """sqrt(mean over points of dx^2 + dy^2): per-point distance RMSE."""
    d = _offsets(preds_px, targets_px)
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=1))))


def classification_summary(cm: ConfusionMatrix3) -> Dict[str, object]:
    """The reported metric set for one model on one partition."""
    recalls = per_class_recall(cm)
    sn = severe_to_normal(cm)
    defined = recalls[~np.isnan(recalls)]
    return {
        "n": cm.total,
        "accuracy": accuracy(cm),
        "balanced_accuracy": float(defined.mean()) if defined.size else math.nan,
        "recall": {g.label: float(r) for g, r in zip(GRADES, recalls)},
        "severe_to_normal": {
            "rate": sn.rate,
            "numerator": sn.numerator,
            "denominator": sn.denominator,
        },
        "confusion": cm.to_list(),
    }


def majority_baseline(
    train_labels: Sequence[int], eval_labels: Sequence[int]
) -> Dict[str, object]:
    """Metrics of always predicting the most frequent training grade.

    Ties go to the lowest grade index.
    """
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=3)
    majority = int(np.argmax(counts))
    preds = np.full(len(eval_labels), majority, dtype=np.int64)
    summary = classification_summary(confusion_matrix(preds, eval_labels))
    summary["predicted_grade"] = SeverityGrade(majority).label
    return summary


def ema(values: Sequence[Optional[float]], factor: float = EMA_FACTOR) -> List[float]:
    """s_t = factor * s_{t-1} + (1 - factor) * v_t.

    Seeded with the first defined value; NaN gaps carry s forward.
    """
    smoothed: List[float] = []
    state: Optional[float] = None
    for value in values:
        if value is not None and not math.isnan(value):
            state = value if state is None else factor * state + (1.0 - factor) * value
        smoothed.append(math.nan if state is None else state)
    return smoothed
