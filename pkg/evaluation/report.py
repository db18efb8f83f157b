"""
Report bundle: metrics JSON, confusion and comparison CSVs, history CSVs,
training-curve plots, a confusion heatmap and localization overlays.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from data.types import (  # noqa: E402
    DatasetManifest,
    DiscKey,
    DiscLevel,
    SeverityGrade,
)
from evaluation.metrics import EMA_FACTOR, ema  # noqa: E402
from processing.preprocessing import (  # noqa: E402
    normalize_intensity,
    round_half_up,
    to_uint8,
)
from training.history import TrainHistory  # noqa: E402
from utils.file_manager import read_slice, save_json  # noqa: E402

logger = logging.getLogger(__name__)

Center = Tuple[float, float]

TRUTH_COLOR = (0, 200, 0)  # BGR green
PREDICTION_COLOR = (0, 0, 255)  # BGR red
RECALL_COLUMNS = {
    SeverityGrade.NORMAL: "val_recall_normal",
    SeverityGrade.MODERATE: "val_recall_moderate",
    SeverityGrade.SEVERE: "val_recall_severe",
}
COMPARISON_COLUMNS = [
    "model",
    "recall_normal",
    "recall_moderate",
    "recall_severe",
    "accuracy",
    "balanced_accuracy",
    "severe_to_normal",
    "severe_to_normal_count",
]


@dataclass
class OverlayCase:
    """One patient's annotated slice with truth and predicted centers per level."""

    patient_id: str
    image: np.ndarray  # uint8 H x W
    truth: Dict[DiscLevel, Center]
    predicted: Dict[DiscLevel, Center]


@dataclass
class ReportBundle:
    out_dir: Path
    files: List[Path] = field(default_factory=list)


def save_figure(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_lr(history: TrainHistory):
    frame = history.to_frame()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(frame["epoch"], frame["train_loss"], label="train loss")
    ax.plot(frame["epoch"], frame["val_loss"], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    lr_ax = ax.twinx()
    lr_ax.plot(
        frame["epoch"], frame["lr"], color="gray", linestyle="--", label="learning rate"
    )
    lr_ax.set_ylabel("learning rate")
    handles, labels = ax.get_legend_handles_labels()
    lr_handles, lr_labels = lr_ax.get_legend_handles_labels()
    ax.legend(handles + lr_handles, labels + lr_labels, loc="upper right")
    ax.set_title(f"{history.stage}: loss and learning rate")
    return fig


def plot_balanced_accuracy(history: TrainHistory):
    frame = history.to_frame()
    scores = frame["val_balanced_accuracy"]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(frame["epoch"], scores, marker="o", label="val balanced accuracy")
    if scores.notna().any():
        best_epoch = frame.loc[scores.astype(float).idxmax(), "epoch"]
        ax.axvline(
            best_epoch, color="gray", linestyle=":", label=f"best epoch {best_epoch}"
        )
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("balanced accuracy")
    ax.legend(loc="lower right")
    ax.set_title(f"{history.stage}: validation balanced accuracy")
    return fig


def plot_recall_trajectories(history: TrainHistory, factor: float = EMA_FACTOR):
    """Raw per-class recall (faint) with EMA-smoothed overlays (solid)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [r.epoch for r in history.records]
    palette = sns.color_palette("deep", 3)
    for grade, column in RECALL_COLUMNS.items():
        raw = [np.nan if v is None else v for v in history.column(column)]
        color = palette[int(grade)]
        ax.plot(epochs, raw, color=color, alpha=0.3)
        smoothed = ema(raw, factor)
        ax.plot(epochs, smoothed, color=color, linewidth=2, label=grade.display)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("epoch")
    ax.set_ylabel("recall")
    ax.legend(loc="lower right", title=f"EMA {factor}")
    ax.set_title(f"{history.stage}: per-class validation recall")
    return fig


def plot_confusion_heatmap(
    confusion: Sequence[Sequence[int]], title: str = "Confusion matrix"
):
    names = [g.display for g in SeverityGrade]
    fig, ax = plt.subplots(figsize=(5, 4))
    sns.heatmap(
        np.asarray(confusion, dtype=np.int64),
        annot=True,
        fmt="d",
        cmap="Blues",
        xticklabels=names,
        yticklabels=names,
        ax=ax,
    )
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    return fig


def _to_bgr(gray: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(np.ascontiguousarray(gray), cv2.COLOR_GRAY2BGR)


def _panel(
    image: np.ndarray, center: Center, half: int, scale: int
) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Window of side 2 * half around center (zero-padded at the border), upscaled."""
    padded = np.pad(image, half, mode="constant")
    cx, cy = round_half_up(center[0]) + half, round_half_up(center[1]) + half
    window = padded[cy - half : cy + half, cx - half : cx + half]
    side = 2 * half * scale
    big = cv2.resize(window, (side, side), interpolation=cv2.INTER_NEAREST)
    # source pixel at panel (0, 0), in unpadded coordinates
    origin = (cx - 2 * half, cy - 2 * half)
    return _to_bgr(big), origin


def _to_panel(point: Center, origin: Tuple[int, int], scale: int) -> Tuple[int, int]:
    return (
        int((point[0] - origin[0] + 0.5) * scale),
        int((point[1] - origin[1] + 0.5) * scale),
    )


def render_localization_overlay(
    case: OverlayCase, half: int = 48, scale: int = 2
) -> np.ndarray:
    """Rows per level: left ground truth (green circle), right prediction
    (red cross) over the truth."""
    rows = []
    for level in DiscLevel:
        if level not in case.truth:
            continue
        truth = case.truth[level]
        left, origin = _panel(case.image, truth, half, scale)
        right = left.copy()

        radius = max(3, 3 * scale)
        cv2.circle(left, _to_panel(truth, origin, scale), radius, TRUTH_COLOR, 2)
        cv2.circle(right, _to_panel(truth, origin, scale), radius, TRUTH_COLOR, 1)
        if level in case.predicted:
            cv2.drawMarker(
                right,
                _to_panel(case.predicted[level], origin, scale),
                PREDICTION_COLOR,
                markerType=cv2.MARKER_CROSS,
                markerSize=4 * scale + 6,
                thickness=2,
            )
        white = (255, 255, 255)
        font = cv2.FONT_HERSHEY_SIMPLEX
        cv2.putText(left, level.value, (4, 14), font, 0.45, white, 1)
        rows.append(np.hstack([left, right]))
    if not rows:
        raise ValueError(f"no annotated levels for patient {case.patient_id}")
    return np.vstack(rows)


def overlay_cases(
    manifest: DatasetManifest,
    predicted_centers: Mapping[DiscKey, Center],
    limit: int = 2,
) -> List[OverlayCase]:
    """Build overlay inputs for the first ``limit`` patients that have predictions."""
    representative = manifest.representative()
    by_series: Dict[Tuple[str, str], List[DiscKey]] = {}
    for key in sorted(predicted_centers, key=lambda k: k.sort_key):
        by_series.setdefault((key.patient_id, key.series_id), []).append(key)

    cases = []
    for (patient_id, series_id), keys in list(by_series.items())[:limit]:
        slice_index = representative[keys[0]].slice_index
        pixels = read_slice(manifest.image_path(patient_id, series_id, slice_index))
        truth = {k.level: (representative[k].x, representative[k].y) for k in keys}
        cases.append(
            OverlayCase(
                patient_id=patient_id,
                image=to_uint8(normalize_intensity(pixels)),
                truth=truth,
                predicted={k.level: predicted_centers[k] for k in keys},
            )
        )
    return cases


def comparison_table(models: Mapping[str, Mapping[str, Any]]) -> pd.DataFrame:
    """One row per model with per-class recall, accuracy, balanced accuracy and
    severe-to-normal error."""
    rows = []
    for name, summary in models.items():
        sn = summary["severe_to_normal"]
        rows.append(
            {
                "model": name,
                "recall_normal": summary["recall"]["normal"],
                "recall_moderate": summary["recall"]["moderate"],
                "recall_severe": summary["recall"]["severe"],
                "accuracy": summary["accuracy"],
                "balanced_accuracy": summary["balanced_accuracy"],
                "severe_to_normal": sn["rate"],
                "severe_to_normal_count": f"{sn['numerator']}/{sn['denominator']}",
            }
        )
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def emit_report(
    histories: Mapping[str, TrainHistory],
    metrics: Mapping[str, Any],
    out_dir: Union[str, Path],
    overlays: Sequence[OverlayCase] = (),
) -> ReportBundle:
    """Write the full report bundle into out_dir"""
    if not histories and not metrics:
        raise ValueError("nothing to report: no histories and no metrics")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out_dir=out_dir)

    def add_figure(fig, name: str) -> None:
        bundle.files.append(save_figure(fig, out_dir / name))

    bundle.files.append(save_json(out_dir / "metrics.json", dict(metrics)))
    confusion = (metrics.get("ground_truth_coords") or {}).get("confusion")
    if confusion is not None:
        frame = pd.DataFrame(
            confusion,
            index=[f"true_{g.label}" for g in SeverityGrade],
            columns=[f"pred_{g.label}" for g in SeverityGrade],
        )
        path = out_dir / "confusion.csv"
        frame.to_csv(path, lineterminator="\n")
        bundle.files.append(path)
        add_figure(plot_confusion_heatmap(confusion), "confusion.png")

    if metrics.get("comparison"):
        path = out_dir / "comparison.csv"
        comparison_table(metrics["comparison"]).to_csv(
            path, index=False, float_format="%.4f", lineterminator="\n"
        )
        bundle.files.append(path)

    for name, history in histories.items():
        if not history.records:
            continue
        bundle.files.append(history.save_csv(out_dir / f"history_{name}.csv"))
        add_figure(plot_loss_lr(history), f"loss_lr_{name}.png")
        if any(r.val_balanced_accuracy is not None for r in history.records):
            add_figure(plot_balanced_accuracy(history), f"balanced_accuracy_{name}.png")
            add_figure(plot_recall_trajectories(history), f"recall_{name}.png")

    for case in overlays:
        path = out_dir / f"localization_{case.patient_id}.png"
        if not cv2.imwrite(str(path), render_localization_overlay(case)):
            raise OSError(f"could not write {path}")
        bundle.files.append(path)

    logger.info(f"📊 Report written to {out_dir} ({len(bundle.files)} files)")
    return bundle
