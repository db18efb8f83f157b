"""
Synthetic sagittal lumbar phantom with known disc centers and severity.

Each patient gets five disc ellipses stacked vertically, vertebral bodies between
them and a bright canal band posterior to the discs. Severity narrows the canal
locally behind the disc and darkens the disc, so the ROI crop alone carries the
label. Generation is a pure function of (config, seed).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.ndimage import gaussian_filter

from data.manifest import save_manifest
from data.types import (
    Annotation,
    DatasetManifest,
    DiscKey,
    DiscLevel,
    SeverityGrade,
    SliceImage,
)
from utils.file_manager import write_pgm16

logger = logging.getLogger(__name__)

SERIES_ID = "T2SAG"

# fractions of the image size
TEMPLATE_X = (0.42, 0.432, 0.44, 0.44, 0.43)
TEMPLATE_Y = (0.22, 0.36, 0.50, 0.64, 0.78)
CANAL_OFFSET = 0.12
CANAL_HALF_WIDTH = 0.022
NARROWING_SPAN = 0.04
DISC_AXES = (0.07, 0.022)

# canal half-width multiplier and disc brightness per grade
CANAL_FACTOR = {
    SeverityGrade.NORMAL: 1.0,
    SeverityGrade.MODERATE: 0.55,
    SeverityGrade.SEVERE: 0.2,
}
DISC_INTENSITY = {
    SeverityGrade.NORMAL: 0.62,
    SeverityGrade.MODERATE: 0.5,
    SeverityGrade.SEVERE: 0.38,
}

BACKGROUND = 0.06
VERTEBRA = 0.35
CANAL = 0.9
FULL_SCALE = 50000.0


class PhantomConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_patients: int = Field(default=200, ge=1)
    slices_per_series: int = Field(default=9, ge=3)
    image_size: int = Field(default=320, ge=64)
    grade_probabilities: Tuple[float, float, float] = (0.77, 0.15, 0.08)
    noise_std: float = Field(default=0.02, ge=0.0)
    geometry_jitter: float = Field(
        default=1.0, ge=0.0, description="0 renders the template exactly"
    )
    slice_drift_px: float = Field(default=1.0, ge=0.0)
    seed: int = 0
    workers: int = Field(default=1, ge=1)

    @field_validator("grade_probabilities")
    @classmethod
    def _sums_to_one(cls, value):
        if any(p < 0 for p in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(
                f"grade_probabilities must be non-negative and sum to 1, got {value}"
            )
        return value

    @field_validator("slices_per_series")
    @classmethod
    def _odd(cls, value):
        if value % 2 == 0:
            raise ValueError(
                f"slices_per_series must be odd so a mid slice exists, got {value}"
            )
        return value


@dataclass(frozen=True)
class PatientParams:
    """Everything needed to render any slice of one patient's series."""

    patient_id: str
    image_size: int
    grades: Tuple[SeverityGrade, ...]
    centers: Tuple[Tuple[int, int], ...]  # (x, y) per level on the mid slice
    gain: float = 1.0
    baseline: float = 0.0
    noise_std: float = 0.0
    drift_px: float = 0.0


@dataclass(frozen=True)
class RenderedSlice:
    image: SliceImage
    centers: Dict[DiscLevel, Tuple[float, float]]
    canal_half_widths: Dict[DiscLevel, float]


def template_centers(image_size: int) -> Tuple[Tuple[int, int], ...]:
    return tuple(
        (int(round(fx * image_size)), int(round(fy * image_size)))
        for fx, fy in zip(TEMPLATE_X, TEMPLATE_Y)
    )


def allocate_grades(
    n_discs: int, probabilities: Tuple[float, float, float], rng: np.random.Generator
) -> np.ndarray:
    """Exact largest-remainder class counts, shuffled.

    Keeps frequencies within one disc of the target.
    """
    quotas = np.asarray(probabilities, dtype=np.float64) * n_discs
    counts = np.floor(quotas + 1e-9).astype(int)
    remainder = n_discs - counts.sum()
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    labels = np.repeat(np.arange(3), counts)
    return rng.permutation(labels)


def _ellipse_mask(xx, yy, cx, cy, a, b, angle_rad):
    cos, sin = np.cos(angle_rad), np.sin(angle_rad)
    u = (xx - cx) * cos + (yy - cy) * sin
    v = -(xx - cx) * sin + (yy - cy) * cos
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_phantom_slice(
    params: PatientParams, slice_offset: int, rng: np.random.Generator
) -> RenderedSlice:
    """Render one slice; the returned centers are exactly the ellipse centers drawn."""
    size = params.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), BACKGROUND, dtype=np.float64)

    shift = params.drift_px * slice_offset
    centers = [(float(cx + shift), float(cy)) for cx, cy in params.centers]
    a, b = DISC_AXES[0] * size, DISC_AXES[1] * size

    # vertebral bodies between and around the discs
    ys = [c[1] for c in centers]
    spacing = float(np.mean(np.diff(ys)))
    xs = [c[0] for c in centers]
    body_centers = (
        [ys[0] - spacing / 2]
        + [(ys[i] + ys[i + 1]) / 2 for i in range(4)]
        + [ys[-1] + spacing / 2]
    )
    body_xs = [xs[0]] + [(xs[i] + xs[i + 1]) / 2 for i in range(4)] + [xs[-1]]
    half_h = max(spacing / 2 - b - 2, 2.0)
    for bx, by in zip(body_xs, body_centers):
        body = (np.abs(yy - by) <= half_h) & (np.abs(xx - bx) <= a * 0.95)
        img[body] = VERTEBRA

    # canal band with local narrowing behind each disc; fades on lateral slices
    canal_x = np.interp(yy[:, 0], ys, xs) + CANAL_OFFSET * size
    half_width = np.full(size, CANAL_HALF_WIDTH * size)
    span = NARROWING_SPAN * size
    for (cx, cy), grade in zip(centers, params.grades):
        narrowing = (1.0 - CANAL_FACTOR[grade]) * CANAL_HALF_WIDTH * size
        half_width -= narrowing * np.clip(1.0 - np.abs(yy[:, 0] - cy) / span, 0.0, None)
    canal = np.abs(xx - canal_x[:, None]) <= half_width[:, None]
    visibility = max(0.0, 1.0 - 0.25 * abs(slice_offset))
    img[canal] = BACKGROUND + (CANAL - BACKGROUND) * visibility

    # discs, tilted slightly with lordosis
    for level_idx, ((cx, cy), grade) in enumerate(zip(centers, params.grades)):
        angle = np.deg2rad(-6.0 + 3.0 * level_idx)
        img[_ellipse_mask(xx, yy, cx, cy, a, b, angle)] = DISC_INTENSITY[grade]

    img = gaussian_filter(img, sigma=0.8)
    scaled = img * FULL_SCALE * params.gain + params.baseline
    if params.noise_std > 0:
        noise = rng.normal(0.0, params.noise_std * 65535.0, size=scaled.shape)
        scaled = scaled + noise
    pixels = np.clip(np.rint(scaled), 0, 65535).astype(np.uint16)

    levels = list(DiscLevel)
    rows = np.arange(size)
    return RenderedSlice(
        image=SliceImage(pixels),
        centers={lvl: c for lvl, c in zip(levels, centers)},
        canal_half_widths={
            lvl: float(np.interp(c[1], rows, half_width))
            for lvl, c in zip(levels, centers)
        },
    )


def sample_patient(
    index: int, grades: Tuple[SeverityGrade, ...], config: PhantomConfig
) -> PatientParams:
    rng = np.random.default_rng([config.seed, index, 0])
    size = config.image_size
    jitter = config.geometry_jitter
    dx, dy = rng.uniform(-0.04, 0.04, size=2) * size * jitter
    per_level = rng.uniform(-0.01, 0.01, size=(5, 2)) * size * jitter
    centers = tuple(
        (int(round(x + dx + px)), int(round(y + dy + py)))
        for (x, y), (px, py) in zip(template_centers(size), per_level)
    )
    return PatientParams(
        patient_id=f"P{index:04d}",
        image_size=size,
        grades=grades,
        centers=centers,
        gain=float(rng.uniform(0.85, 1.1)),
        baseline=float(rng.uniform(500.0, 2000.0)),
        noise_std=config.noise_std,
        drift_px=config.slice_drift_px,
    )


def _render_patient(
    index: int, params: PatientParams, config: PhantomConfig, image_root: Path
) -> List[Annotation]:
    rng = np.random.default_rng([config.seed, index, 1])
    streams = rng.spawn(config.slices_per_series)
    mid = config.slices_per_series // 2
    series_dir = image_root / params.patient_id / SERIES_ID
    records = []
    for slice_index, stream in enumerate(streams):
        rendered = render_phantom_slice(params, slice_index - mid, stream)
        write_pgm16(series_dir / f"slice_{slice_index:03d}.pgm", rendered.image.pixels)
        if slice_index == mid:
            for level, grade in zip(DiscLevel, params.grades):
                x, y = rendered.centers[level]
                key = DiscKey(
                    patient_id=params.patient_id, series_id=SERIES_ID, level=level
                )
                records.append(
                    Annotation(key=key, slice_index=slice_index, x=x, y=y, grade=grade)
                )
    return records


def generate_phantom_dataset(
    config: PhantomConfig, out_dir: Union[str, Path]
) -> DatasetManifest:
    """Render every patient and write images plus manifest.csv/manifest.json
    under out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_root = out_dir / "images"

    label_rng = np.random.default_rng([config.seed, 2**31 - 1])
    labels = allocate_grades(
        5 * config.n_patients, config.grade_probabilities, label_rng
    )
    patients = [
        sample_patient(
            i, tuple(SeverityGrade(int(g)) for g in labels[5 * i : 5 * i + 5]), config
        )
        for i in range(config.n_patients)
    ]

    logger.info(
        f"🧪 Rendering phantom: {config.n_patients} patients "
        f"× {config.slices_per_series} slices"
    )

    def render(item):
        return _render_patient(item[0], item[1], config, image_root)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(render, enumerate(patients)))
    else:
        chunks = [render(item) for item in enumerate(patients)]

    records = tuple(r for chunk in chunks for r in chunk)
    manifest = DatasetManifest(records=records, image_root=image_root)
    save_manifest(manifest, out_dir / "manifest.csv")
    logger.info(
        f"✅ Phantom written to {out_dir} ({len(manifest.records)} annotated discs)"
    )
    return manifest
