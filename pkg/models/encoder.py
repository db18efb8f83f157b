"""
Single-channel residual encoder: a torchvision ResNet without its final
fully connected layer, returning one 512-d feature vector per input.
"""

from typing import Dict, List, Literal, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field
from torchvision.models.resnet import BasicBlock, ResNet

from utils.exceptions import ConfigError

STAGE_NAMES: Tuple[str, ...] = ("stem", "layer1", "layer2", "layer3", "layer4")
FEATURE_DIM = 512

DEPTH_LAYERS: Dict[str, List[int]] = {
    "standard-18": [2, 2, 2, 2],
    "tiny": [1, 1, 1, 1],
}


class EncoderSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_channels: int = Field(default=1, ge=1)
    feature_dim: int = FEATURE_DIM
    depth_preset: Literal["standard-18", "tiny"] = "standard-18"
    input_size: int = Field(default=224, gt=0)

    @classmethod
    def for_preset(
        cls, preset: str, input_size: int, input_channels: int = 1
    ) -> "EncoderSpec":
        depth = "tiny" if getattr(preset, "value", preset) == "tiny" else "standard-18"
        return cls(
            input_channels=input_channels, depth_preset=depth, input_size=input_size
        )


def _backbone(spec: EncoderSpec) -> ResNet:
    net = ResNet(BasicBlock, DEPTH_LAYERS[spec.depth_preset])
    if spec.input_channels != 3:
        net.conv1 = nn.Conv2d(
            spec.input_channels, 64, kernel_size=7, stride=2, padding=3, bias=False
        )
    return net


class DiscEncoder(nn.Module):
    """ResNet body split into named stages so fine-tuning can freeze them by name."""

    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        if spec.feature_dim != FEATURE_DIM:
            raise ConfigError(
                f"encoder feature_dim is fixed at {FEATURE_DIM}, "
                f"got {spec.feature_dim}"
            )
        self.spec = spec
        net = _backbone(spec)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4
        self.pool = nn.AdaptiveAvgPool2d(1)

    @classmethod
    def from_pretrained_backbone(cls, spec: EncoderSpec) -> "DiscEncoder":
        """Encoder initialized from torchvision's ImageNet ResNet-18 weights.

        The weights are downloaded on first use.
        """
        from torchvision.models import ResNet18_Weights, resnet18

        if spec.depth_preset != "standard-18" or spec.input_channels != 3:
            raise ConfigError(
                "ImageNet weights only fit the 3-channel standard-18 backbone"
            )
        encoder = cls(spec)
        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
        state = {k: v for k, v in net.state_dict().items() if not k.startswith("fc.")}
        renamed = {}
        for key, value in state.items():
            head, _, rest = key.partition(".")
            if head in ("conv1", "bn1"):
                renamed[f"stem.{0 if head == 'conv1' else 1}.{rest}"] = value
            else:
                renamed[key] = value
        encoder.load_state_dict(renamed)
        return encoder

    def stage(self, name: str) -> nn.Module:
        if name not in STAGE_NAMES:
            raise ConfigError(
                f"unknown encoder stage {name!r}; expected one of {STAGE_NAMES}"
            )
        return getattr(self, name)

    def check_input(self, x: torch.Tensor) -> None:
        size = self.spec.input_size
        expected = (self.spec.input_channels, size, size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            dims = " x ".join(map(str, expected))
            raise ConfigError(
                f"encoder expects B x {dims} input, got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.pool(x), 1)


def encode(x: torch.Tensor, encoder: DiscEncoder) -> torch.Tensor:
    """B x C x H x W standardized inputs -> B x 512 features.

    A single C x H x W input is batched.
    """
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return encoder(x)
