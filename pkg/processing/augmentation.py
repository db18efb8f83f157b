"""
Stochastic view generation for contrastive pretraining.

Every random draw comes from the numpy Generator passed in, so a view is a pure
function of (patch, policy, generator state).
"""

from dataclasses import dataclass
from typing import List, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.exceptions import ConfigError


class AugmentPolicy(BaseModel):
    """Transform ranges.

    Applied in order: resized crop, flip, rotation, intensity jitter.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    hflip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    rotation_deg: Tuple[float, float] = (-15.0, 15.0)
    # additive offset in standardized units, drawn from [-b, b]
    brightness_jitter: float = Field(default=0.2, ge=0.0)
    # contrast factor drawn from [1 - c, 1 + c]
    contrast_jitter: float = Field(default=0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(
                f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}"
            )
        if self.rotation_deg[0] > self.rotation_deg[1]:
            raise ValueError(f"rotation_deg range is reversed: {self.rotation_deg}")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(enabled=False)


def _resized_crop(
    img: np.ndarray, scale: float, rng: np.random.Generator
) -> np.ndarray:
    size = img.shape[0]
    side = int(np.clip(round(np.sqrt(scale) * size), 1, size))
    row = int(rng.integers(0, size - side + 1))
    col = int(rng.integers(0, size - side + 1))
    if side == size:
        return img
    crop = img[row : row + side, col : col + side]
    return cv2.resize(crop, (size, size), interpolation=cv2.INTER_LINEAR)


def _rotate(img: np.ndarray, angle: float) -> np.ndarray:
    size = img.shape[0]
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, angle, 1.0)
    return cv2.warpAffine(
        img,
        matrix,
        (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def augment_view(
    patch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator
) -> np.ndarray:
    """One stochastic view of a square standardized patch; shape is preserved."""
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ConfigError(f"augment_view expects a square 2-D patch, got {patch.shape}")
    img = np.array(patch, dtype=np.float32, copy=True)
    if not policy.enabled:
        return img

    # every draw happens up front, whether or not its op is a no-op
    scale = rng.uniform(*policy.crop_scale)
    flip = rng.random() < policy.hflip_prob
    angle = rng.uniform(*policy.rotation_deg)
    brightness = rng.uniform(-policy.brightness_jitter, policy.brightness_jitter)
    contrast = rng.uniform(1.0 - policy.contrast_jitter, 1.0 + policy.contrast_jitter)

    img = _resized_crop(img, scale, rng)
    if flip:
        img = img[:, ::-1]
    if angle != 0.0:
        img = _rotate(np.ascontiguousarray(img), angle)
    if contrast != 1.0:
        mean = np.float32(img.mean())
        img = (img - mean) * np.float32(contrast) + mean
    if brightness != 0.0:
        img = img + np.float32(brightness)
    return np.ascontiguousarray(img, dtype=np.float32)


@dataclass(frozen=True)
class ContrastiveViews:
    views: List[np.ndarray]
    group_id: int


def make_contrastive_views(
    patch: np.ndarray,
    views: int,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    group_id: int = 0,
) -> ContrastiveViews:
    """V independent augmentations of one disc sharing one group id.

    Each view draws from its own child stream.
    """
    if views < 2:
        raise ConfigError(
            f"contrastive pretraining needs at least 2 views per disc, got {views}"
        )
    streams = rng.spawn(views)
    augmented = [augment_view(patch, policy, s) for s in streams]
    return ContrastiveViews(views=augmented, group_id=int(group_id))
