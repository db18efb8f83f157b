"""
Per-epoch training records and best-epoch selection.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

from utils.exceptions import DataError

CRITERIA = {
    "val_balanced_accuracy": "max",
    "val_loss": "min",
    "val_rmse": "min",
}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_balanced_accuracy: Optional[float] = None
    val_recall_normal: Optional[float] = None
    val_recall_moderate: Optional[float] = None
    val_recall_severe: Optional[float] = None
    val_rmse: Optional[float] = None
    grad_scale: Optional[float] = None


COLUMNS = [f.name for f in fields(EpochRecord)]
OPTIONAL_COLUMNS = COLUMNS[4:]
REQUIRED_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


@dataclass
class TrainHistory:
    """Ordered epoch records of one stage.

    Epochs are 1-based and strictly increasing.
    """

    stage: str
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            last = self.records[-1].epoch
            raise DataError(f"epoch {record.epoch} recorded after epoch {last}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=COLUMNS)

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(
            path, index=False, float_format="%.17g", lineterminator="\n"
        )
        return path

    @classmethod
    def load_csv(cls, path: Union[str, Path], stage: str = "") -> "TrainHistory":
        frame = pd.read_csv(path)
        missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError(f"history {path} lacks columns {missing}")
        history = cls(stage=stage or Path(path).parent.name)
        for row in frame.to_dict(orient="records"):
            values: Dict = {name: row.get(name) for name in COLUMNS}
            for name in OPTIONAL_COLUMNS:
                if values[name] is not None and math.isnan(values[name]):
                    values[name] = None
            values["epoch"] = int(values["epoch"])
            history.append(EpochRecord(**values))
        return history


def select_best_checkpoint(history: TrainHistory, criterion: str) -> int:
    """Epoch with the best criterion value.

    Ties go to the earlier epoch and NaN never wins.
    """
    if not history.records:
        raise DataError("cannot select a checkpoint from an empty history")
    if criterion not in CRITERIA:
        raise DataError(
            f"unknown selection criterion {criterion!r}; "
            f"expected one of {sorted(CRITERIA)}"
        )
    sign = 1.0 if CRITERIA[criterion] == "max" else -1.0

    best_epoch, best_score = history.records[0].epoch, -math.inf
    for record in history.records:
        value = getattr(record, criterion)
        if value is None or math.isnan(value):
            continue
        score = sign * value
        if score > best_score:
            best_epoch, best_score = record.epoch, score
    return best_epoch


def is_improvement(
    value: Optional[float], best: Optional[float], criterion: str
) -> bool:
    """Strict improvement in the criterion's direction.

    Matches the tie rule of select_best_checkpoint.
    """
    if value is None or math.isnan(value):
        return False
    if best is None:
        return True
    return value > best if CRITERIA[criterion] == "max" else value < best
