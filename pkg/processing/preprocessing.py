"""
Slice standardization chain:
normalize -> pad -> coordinate-guided crop -> 8-bit export -> resize/standardize.

All functions are pure and operate on numpy arrays.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from data.types import Annotation, DatasetManifest, RoiPatch, SliceImage
from utils.exceptions import DataError, GeometryError
from utils.file_manager import read_slice, write_png8

logger = logging.getLogger(__name__)


class PreprocessConfig(BaseModel):
    """Geometry and normalization constants for the model inputs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    roi_size: int = Field(default=96, gt=0)
    pad_width: Optional[int] = Field(
        default=None, ge=0, description="defaults to roi_size // 2"
    )
    pad_value: float = 0.0
    model_input_size: int = Field(default=224, gt=0)
    regression_input_size: int = Field(default=256, gt=0)
    channel_mean: float = 0.5
    channel_std: float = Field(default=0.5, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.roi_size % 2:
            raise ValueError(f"roi_size must be even, got {self.roi_size}")
        if self.pad_width is not None and self.pad_width < self.roi_size // 2:
            raise ValueError(
                f"pad_width must be >= roi_size/2 ({self.roi_size // 2}), "
                f"got {self.pad_width}"
            )
        return self

    @property
    def effective_pad(self) -> int:
        return self.roi_size // 2 if self.pad_width is None else self.pad_width


def round_half_up(value: float) -> int:
    """Single rounding rule for coordinates and quantization."""
    return int(np.floor(value + 0.5))


def normalize_intensity(image: Union[SliceImage, np.ndarray]) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to all zeros."""
    pixels = image.pixels if isinstance(image, SliceImage) else np.asarray(image)
    if pixels.size == 0:
        raise DataError("cannot normalize an empty image")
    data = pixels.astype(np.float64)
    low, high = data.min(), data.max()
    if high <= low:
        return np.zeros(pixels.shape, dtype=np.float32)
    return ((data - low) / (high - low)).astype(np.float32)


def pad_constant(img: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad < 0:
        raise GeometryError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return img.copy()
    return np.pad(img, pad, mode="constant", constant_values=value)


def crop_roi(
    img: np.ndarray,
    center_xy: Tuple[float, float],
    roi_size: int,
    source=None,
    slice_index: Optional[int] = None,
) -> RoiPatch:
    """Cut a roi_size square whose center pixel is round(center).

    center is in padded coordinates.
    """
    half = roi_size // 2
    x, y = center_xy
    row0 = round_half_up(y) - half
    col0 = round_half_up(x) - half
    height, width = img.shape[:2]
    if row0 < 0 or col0 < 0 or row0 + roi_size > height or col0 + roi_size > width:
        raise GeometryError(
            f"crop of size {roi_size} centered at (x={x}, y={y}) "
            f"exceeds image of size {height}x{width}"
        )
    pixels = img[row0 : row0 + roi_size, col0 : col0 + roi_size].copy()
    stage = "uint8" if pixels.dtype == np.uint8 else "float"
    return RoiPatch(
        pixels=pixels,
        stage=stage,
        source=source,
        slice_index=slice_index,
        crop_origin=(row0, col0),
    )


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to [0,255] with round-half-up.

    Out-of-range input is clamped.
    """
    clipped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img.astype(np.float32, copy=True)
    return cv2.resize(
        img.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR
    )


def standardize_for_model(
    patch: Union[RoiPatch, np.ndarray],
    size: int,
    channel_mean: float = 0.5,
    channel_std: float = 0.5,
) -> np.ndarray:
    """Bilinear resize to size x size, then (x - mean) / std.

    Single channel, float32.
    """
    pixels = patch.pixels if isinstance(patch, RoiPatch) else np.asarray(patch)
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(np.float32) / 255.0
    resized = resize_bilinear(pixels, size)
    standardized = (resized - np.float32(channel_mean)) / np.float32(channel_std)
    return standardized.astype(np.float32)


def stack_2p5d(series: Sequence[np.ndarray], center_index: int) -> np.ndarray:
    """Channels (i-1, i, i+1); the edge slice is duplicated at a series boundary."""
    if len(series) < 1:
        raise DataError("2.5D stacking needs at least one slice")
    if not 0 <= center_index < len(series):
        raise DataError(
            f"slice index {center_index} outside series of length {len(series)}"
        )
    shape = series[0].shape
    if any(s.shape != shape for s in series):
        raise DataError("2.5D stacking needs equally shaped slices")
    last = len(series) - 1
    order = (max(center_index - 1, 0), center_index, min(center_index + 1, last))
    return np.stack([series[i] for i in order], axis=0).astype(np.float32)


def extract_roi(
    slice_image: SliceImage,
    annotation_xy: Tuple[float, float],
    config: PreprocessConfig,
    source=None,
    slice_index: Optional[int] = None,
) -> RoiPatch:
    """normalize -> pad -> crop, with the annotation shifted into padded coordinates."""
    pad = config.effective_pad
    padded = pad_constant(normalize_intensity(slice_image), pad, config.pad_value)
    x, y = annotation_xy
    return crop_roi(
        padded,
        (x + pad, y + pad),
        config.roi_size,
        source=source,
        slice_index=slice_index,
    )


def quantized_roi(
    slice_image: SliceImage,
    annotation_xy: Tuple[float, float],
    config: PreprocessConfig,
    source=None,
    slice_index: Optional[int] = None,
) -> RoiPatch:
    """extract_roi followed by the 8-bit round trip, so in-memory patches match
    the exported PNGs."""
    patch = extract_roi(
        slice_image, annotation_xy, config, source=source, slice_index=slice_index
    )
    pixels = to_uint8(patch.pixels).astype(np.float32) / 255.0
    return RoiPatch(
        pixels=pixels,
        stage="float",
        source=patch.source,
        slice_index=patch.slice_index,
        crop_origin=patch.crop_origin,
    )


def export_rois(
    manifest: DatasetManifest, out_dir: Union[str, Path], config: PreprocessConfig
) -> Path:
    """Write one lossless 8-bit PNG per representative disc ROI plus an index CSV"""
    out_dir = Path(out_dir)
    rows: List[Dict] = []
    cache: Dict[Path, SliceImage] = {}
    representative = manifest.representative()
    for key in manifest.disc_keys():
        record: Annotation = representative[key]
        path = manifest.image_path(key.patient_id, key.series_id, record.slice_index)
        if path not in cache:
            cache = {path: read_slice(path)}
        patch = extract_roi(
            cache[path],
            (record.x, record.y),
            config,
            source=key,
            slice_index=record.slice_index,
        )
        file_name = f"{key.level.value.replace('/', '_')}.png"
        relative = Path(key.patient_id) / key.series_id / file_name
        write_png8(out_dir / relative, to_uint8(patch.pixels))
        rows.append(
            {
                "patient_id": key.patient_id,
                "series_id": key.series_id,
                "level": key.level.value,
                "slice_index": record.slice_index,
                "crop_row": patch.crop_origin[0],
                "crop_col": patch.crop_origin[1],
                "grade": record.grade.label,
                "png": relative.as_posix(),
            }
        )
    index_path = out_dir / "rois.csv"
    pd.DataFrame(rows).to_csv(index_path, index=False, lineterminator="\n")
    logger.info(f"🖼️ Exported {len(rows)} ROI patches to {out_dir}")
    return index_path
