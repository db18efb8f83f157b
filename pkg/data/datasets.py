"""
Torch datasets over a manifest.

ROI crops are prepared once into an in-memory bank of standardized patches;
the datasets then only index into it (plus augmentation for contrastive views).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from data.types import DatasetManifest, DiscKey, SliceImage
from processing.augmentation import AugmentPolicy, augment_view
from processing.preprocessing import (
    PreprocessConfig,
    normalize_intensity,
    quantized_roi,
    resize_bilinear,
    stack_2p5d,
    standardize_for_model,
)
from utils.exceptions import ConfigError, DataError
from utils.file_manager import read_slice

logger = logging.getLogger(__name__)

Center = Tuple[float, float]


class SeriesReader:
    """Reads slices on demand, keeping only the most recent series in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._series: Optional[Tuple[str, str]] = None
        self._slices: Dict[int, SliceImage] = {}

    def slice(self, patient_id: str, series_id: str, index: int) -> SliceImage:
        if self._series != (patient_id, series_id):
            self._series = (patient_id, series_id)
            self._slices = {}
        if index not in self._slices:
            path = self.manifest.image_path(patient_id, series_id, index)
            self._slices[index] = read_slice(path)
        return self._slices[index]

    def length(self, patient_id: str, series_id: str) -> int:
        return self.manifest.series_length(patient_id, series_id)


def neighbour_slices(center: int, count: int, length: int) -> List[int]:
    """count slice indices centered on center, clamped to the series (edges repeat)."""
    if count < 1 or count % 2 == 0:
        raise ConfigError(
            f"slices per disc must be a positive odd number, got {count}"
        )
    half = count // 2
    last = max(length - 1, 0)
    return [min(max(center + offset, 0), last) for offset in range(-half, half + 1)]


@dataclass
class RoiBank:
    """Standardized S x H x W crops per disc, ordered like ``keys``."""

    keys: List[DiscKey]
    patches: np.ndarray  # N x S x H x W float32
    labels: np.ndarray  # N int64
    levels: np.ndarray  # N int64

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def set_size(self) -> int:
        return int(self.patches.shape[1])

    def subset(self, keys: Sequence[DiscKey]) -> "RoiBank":
        position = {k: i for i, k in enumerate(self.keys)}
        try:
            rows = [position[k] for k in keys]
        except KeyError as e:
            raise DataError(f"disc {e.args[0]} is not in the ROI bank") from e
        return RoiBank(
            keys=list(keys),
            patches=self.patches[rows],
            labels=self.labels[rows],
            levels=self.levels[rows],
        )


def build_roi_bank(
    manifest: DatasetManifest,
    keys: Sequence[DiscKey],
    config: PreprocessConfig,
    slices_per_disc: int = 1,
    centers: Optional[Mapping[DiscKey, Center]] = None,
) -> RoiBank:
    """Crop every disc on its representative slice (and odd-sized neighbourhood)
    at the given centers.

    ``centers`` overrides the annotated coordinates, e.g. with regressor
    predictions.
    """
    if not keys:
        raise DataError("no discs to crop")
    representative = manifest.representative()
    reader = SeriesReader(manifest)
    size = config.model_input_size
    patches = np.empty((len(keys), slices_per_disc, size, size), dtype=np.float32)
    labels = np.empty(len(keys), dtype=np.int64)
    levels = np.empty(len(keys), dtype=np.int64)

    for row, key in enumerate(keys):
        if key not in representative:
            raise DataError(f"disc {key} has no annotation in the manifest")
        record = representative[key]
        center = (record.x, record.y)
        if centers is not None and key in centers:
            center = centers[key]
        indices = [record.slice_index]
        if slices_per_disc > 1:
            length = reader.length(key.patient_id, key.series_id)
            indices = neighbour_slices(record.slice_index, slices_per_disc, length)
        for s, index in enumerate(indices):
            image = reader.slice(key.patient_id, key.series_id, index)
            patch = quantized_roi(image, center, config, source=key, slice_index=index)
            patches[row, s] = standardize_for_model(
                patch, size, config.channel_mean, config.channel_std
            )
        labels[row] = int(record.grade)
        levels[row] = key.level.index

    logger.debug(
        f"Prepared {len(keys)} disc set(s) of {slices_per_disc} slice(s) at {size}px"
    )
    return RoiBank(keys=list(keys), patches=patches, labels=labels, levels=levels)


class ContrastiveViewDataset(Dataset):
    """Item i is V augmented views of disc i, all tagged with group id i.

    Augmentation randomness is a function of (seed, epoch, i) only, so batches
    are reproducible regardless of loader workers or visiting order.
    """

    def __init__(
        self, bank: RoiBank, policy: AugmentPolicy, views: int = 3, seed: int = 0
    ):
        if views < 2:
            raise ConfigError(f"contrastive views per disc must be >= 2, got {views}")
        self.bank = bank
        self.policy = policy
        self.views = views
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.bank)

    def __getitem__(self, index: int):
        patch = self.bank.patches[index, 0]
        rng = np.random.default_rng([self.seed, self.epoch, index])
        streams = rng.spawn(self.views)
        views = np.stack([augment_view(patch, self.policy, s) for s in streams])
        views = views[:, None]
        return torch.from_numpy(views), index


class DiscSetDataset(Dataset):
    """(S x 1 x H x W disc set, grade) pairs; deterministic, no augmentation."""

    def __init__(self, bank: RoiBank):
        self.bank = bank

    def __len__(self) -> int:
        return len(self.bank)

    def __getitem__(self, index: int):
        disc_set = torch.from_numpy(self.bank.patches[index][:, None].copy())
        return disc_set, int(self.bank.labels[index])


@dataclass(frozen=True)
class StackSample:
    key: DiscKey
    slice_key: Tuple[str, str, int]
    target: Tuple[float, float]  # normalized (x / W, y / H)
    size: Tuple[int, int]  # (W, H) of the source slice


class StackedSliceDataset(Dataset):
    """2.5D inputs for the coordinate regressor.

    Stacks are cached per (patient, series, slice) since every disc of a series
    shares its annotated slice in the common case.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        keys: Sequence[DiscKey],
        config: PreprocessConfig,
    ):
        if not keys:
            raise DataError("no discs for the regression dataset")
        self.config = config
        representative = manifest.representative()
        reader = SeriesReader(manifest)
        self.samples: List[StackSample] = []
        self.stacks: Dict[Tuple[str, str, int], np.ndarray] = {}
        size = config.regression_input_size
        mean, std = np.float32(config.channel_mean), np.float32(config.channel_std)

        for key in keys:
            record = representative[key]
            slice_key = (key.patient_id, key.series_id, record.slice_index)
            image = reader.slice(*slice_key)
            if slice_key not in self.stacks:
                length = max(
                    reader.length(key.patient_id, key.series_id), record.slice_index + 1
                )
                low = max(record.slice_index - 1, 0)
                high = min(record.slice_index + 1, length - 1)
                window = [
                    normalize_intensity(reader.slice(key.patient_id, key.series_id, i))
                    for i in range(low, high + 1)
                ]
                stack = stack_2p5d(window, record.slice_index - low)
                resized = np.stack([resize_bilinear(c, size) for c in stack])
                self.stacks[slice_key] = (resized - mean) / std
            self.samples.append(
                StackSample(
                    key=key,
                    slice_key=slice_key,
                    target=(record.x / image.width, record.y / image.height),
                    size=(image.width, image.height),
                )
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        stack = self.stacks[sample.slice_key].astype(np.float32, copy=True)
        return (
            torch.from_numpy(stack),
            torch.tensor(sample.key.level.index, dtype=torch.long),
            torch.tensor(sample.target, dtype=torch.float32),
            torch.tensor(sample.size, dtype=torch.float32),
        )
