"""
Domain types shared across the pipeline.

Identity and annotation records are frozen pydantic models; pixel containers are
frozen dataclasses holding numpy arrays. Everything is immutable after
construction so instances can be shared between readers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from utils.exceptions import DataError


class SeverityGrade(IntEnum):
    """Three-point ordinal stenosis grade."""

    NORMAL = 0
    MODERATE = 1
    SEVERE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def display(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "SeverityGrade":
        if isinstance(value, SeverityGrade):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError as e:
                raise DataError(f"grade index out of range: {value}") from e
        text = str(value).strip().lower()
        # "Normal/Mild" is the source annotation wording for grade 0
        aliases = {"normal": cls.NORMAL, "normal/mild": cls.NORMAL, "mild": cls.NORMAL,
                   "moderate": cls.MODERATE, "severe": cls.SEVERE}
        if text not in aliases:
            raise DataError(f"unknown severity grade: {value!r}")
        return aliases[text]


class DiscLevel(str, Enum):
    """Lumbar intervertebral disc level, cranial to caudal."""

    L1_L2 = "L1/L2"
    L2_L3 = "L2/L3"
    L3_L4 = "L3/L4"
    L4_L5 = "L4/L5"
    L5_S1 = "L5/S1"

    @property
    def index(self) -> int:
        return _LEVEL_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "DiscLevel":
        if not 0 <= int(index) < len(_LEVEL_ORDER):
            raise DataError(f"disc level index out of range: {index}")
        return _LEVEL_ORDER[int(index)]

    @classmethod
    def parse(cls, value) -> "DiscLevel":
        if isinstance(value, DiscLevel):
            return value
        text = str(value).strip().upper().replace("_", "/").replace("-", "/")
        for level in _LEVEL_ORDER:
            if level.value == text:
                return level
        raise DataError(f"unknown disc level: {value!r}")


_LEVEL_ORDER: Tuple[DiscLevel, ...] = tuple(DiscLevel)


class Partition(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


PARTITIONS: Tuple[Partition, ...] = (Partition.TRAIN, Partition.VAL, Partition.TEST)


class DiscKey(BaseModel):
    """Identity of one intervertebral disc.

    The atomic unit for splitting and evaluation.
    """

    model_config = ConfigDict(frozen=True)

    patient_id: str
    series_id: str
    level: DiscLevel

    @field_validator("level", mode="before")
    @classmethod
    def _parse_level(cls, value):
        return DiscLevel.parse(value)

    @property
    def sort_key(self) -> Tuple[str, str, int]:
        return (self.patient_id, self.series_id, self.level.index)

    def __str__(self) -> str:
        return f"{self.patient_id}/{self.series_id}/{self.level.value}"


class Annotation(BaseModel):
    """Ground-truth disc center and grade on one slice.

    Coordinates are source-slice pixels.
    """

    model_config = ConfigDict(frozen=True)

    key: DiscKey
    slice_index: int = Field(ge=0)
    x: float
    y: float
    grade: SeverityGrade

    @field_validator("grade", mode="before")
    @classmethod
    def _parse_grade(cls, value):
        return SeverityGrade.parse(value)

    @field_validator("x", "y")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("coordinate must be finite")
        return value

    def describe(self) -> str:
        return f"{self.key}@slice{self.slice_index}"


@dataclass(frozen=True)
class SliceImage:
    """Raw 16-bit slice."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataError(
                f"slice must be a non-empty 2-D array, got shape {self.pixels.shape}"
            )
        pixels = self.pixels
        if pixels.dtype != np.uint16:
            if pixels.min() < 0 or pixels.max() > 65535:
                raise DataError("slice intensities must lie in [0, 65535]")
            pixels = pixels.astype(np.uint16)
        view = pixels.view()
        view.setflags(write=False)
        object.__setattr__(self, "pixels", view)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class RoiPatch:
    """Square crop centered on a disc, with provenance back to its source slice."""

    pixels: np.ndarray
    stage: Literal["float", "uint8"]
    source: Optional[DiscKey]
    slice_index: Optional[int]
    crop_origin: Tuple[int, int]  # (row, col) in padded-image coordinates

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise DataError(f"ROI patch must be square, got shape {self.pixels.shape}")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


class DatasetManifest(BaseModel):
    """Annotated records plus the root their images are resolved against."""

    model_config = ConfigDict(frozen=True)

    records: Tuple[Annotation, ...]
    image_root: Path
    format_version: int = 1

    @field_validator("image_root")
    @classmethod
    def _absolute_root(cls, value: Path) -> Path:
        return Path(value).expanduser().resolve()

    def disc_keys(self) -> List[DiscKey]:
        """Distinct disc keys in deterministic order."""
        return sorted({r.key for r in self.records}, key=lambda k: k.sort_key)

    def grades(self) -> Dict[DiscKey, SeverityGrade]:
        """Grade per disc (first record wins; validate_manifest flags conflicts)."""
        out: Dict[DiscKey, SeverityGrade] = {}
        for record in self.records:
            out.setdefault(record.key, record.grade)
        return out

    def representative(self) -> Dict[DiscKey, Annotation]:
        """One annotation per disc.

        Picks the record whose slice is the median of its annotated slices.
        """
        by_key: Dict[DiscKey, List[Annotation]] = {}
        for record in self.records:
            by_key.setdefault(record.key, []).append(record)
        out = {}
        for key, recs in by_key.items():
            recs = sorted(recs, key=lambda r: r.slice_index)
            out[key] = recs[(len(recs) - 1) // 2]
        return out

    def series_dir(self, patient_id: str, series_id: str) -> Path:
        return self.image_root / patient_id / series_id

    def image_path(self, patient_id: str, series_id: str, slice_index: int) -> Path:
        """Resolve a slice file; PGM is preferred, a raw .npy array is accepted."""
        stem = self.series_dir(patient_id, series_id) / f"slice_{slice_index:03d}"
        pgm = stem.with_suffix(".pgm")
        if pgm.exists():
            return pgm
        npy = stem.with_suffix(".npy")
        return npy if npy.exists() else pgm

    def series_length(self, patient_id: str, series_id: str) -> int:
        directory = self.series_dir(patient_id, series_id)
        pgm = list(directory.glob("slice_*.pgm"))
        return len(pgm) or len(list(directory.glob("slice_*.npy")))


class SplitAssignment(BaseModel):
    """Disc-level partition membership.

    Entries are a sequence, not a mapping: a disc listed twice stays
    representable and is reported by the leakage audit.
    """

    model_config = ConfigDict(frozen=True)

    entries: Tuple[Tuple[DiscKey, Partition], ...]
    seed: int
    fractions: Tuple[float, float, float]
    warnings: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_fractions(self):
        fractions = self.fractions
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(
                f"fractions must be non-negative and sum to 1, got {fractions}"
            )
        return self

    @property
    def mapping(self) -> Dict[DiscKey, Partition]:
        return {key: part for key, part in self.entries}

    def keys_in(self, partition: Partition) -> List[DiscKey]:
        partition = Partition(partition)
        keys = {k for k, p in self.entries if p == partition}
        return sorted(keys, key=lambda k: k.sort_key)

    def counts(self) -> Dict[Partition, int]:
        return {p: len(self.keys_in(p)) for p in PARTITIONS}


def group_by_key(records: Iterable[Annotation]) -> Dict[DiscKey, List[Annotation]]:
    grouped: Dict[DiscKey, List[Annotation]] = {}
    for record in records:
        grouped.setdefault(record.key, []).append(record)
    return grouped
