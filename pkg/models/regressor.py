"""
2.5D disc-center regressor: three stacked slices plus a learned level embedding
mapped to normalized (x, y) in [0, 1]^2.
"""

from typing import Tuple, Union

import torch
import torch.nn as nn

from config.run_config import RegressorConfig
from data.types import DiscLevel
from models.encoder import FEATURE_DIM, DiscEncoder, EncoderSpec

NUM_LEVELS = len(DiscLevel)


class RoiRegressor(nn.Module):
    def __init__(self, spec: EncoderSpec, config: RegressorConfig = RegressorConfig()):
        super().__init__()
        if spec.input_channels != 3:
            spec = spec.model_copy(update={"input_channels": 3})
        if config.pretrained_backbone:
            self.backbone = DiscEncoder.from_pretrained_backbone(spec)
        else:
            self.backbone = DiscEncoder(spec)
        self.level_embedding = nn.Embedding(NUM_LEVELS, config.level_embedding_dim)
        self.fusion = nn.Sequential(
            nn.Linear(FEATURE_DIM + config.level_embedding_dim, config.fusion_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(config.fusion_hidden, 2),
        )

    def forward(self, x: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
        features = self.backbone(x)
        fused = torch.cat([features, self.level_embedding(levels.long())], dim=1)
        return torch.sigmoid(self.fusion(fused))


def regress_roi(
    stacked: torch.Tensor,
    level: Union[DiscLevel, torch.Tensor],
    regressor: RoiRegressor,
) -> torch.Tensor:
    """3 x H x W or B x 3 x H x W standardized stacks -> normalized (x, y)."""
    if stacked.ndim == 3:
        stacked = stacked.unsqueeze(0)
    if isinstance(level, DiscLevel):
        levels = torch.full(
            (stacked.shape[0],), level.index, dtype=torch.long, device=stacked.device
        )
    else:
        levels = torch.as_tensor(level, device=stacked.device).long().reshape(-1)
    return regressor(stacked, levels)


def to_pixels(normalized: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """(x_hat * W, y_hat * H) in source-slice pixels."""
    scale = torch.tensor(
        [width, height], dtype=normalized.dtype, device=normalized.device
    )
    return normalized * scale


def to_normalized(
    xy: Tuple[float, float], width: int, height: int
) -> Tuple[float, float]:
    return xy[0] / width, xy[1] / height
