"""
Layer freezing and per-group learning rates for differential fine-tuning.
"""

import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from config.run_config import OptimizerConfig
from models.encoder import STAGE_NAMES, DiscEncoder
from utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_FROZEN = ("stem", "layer1", "layer2", "layer3")


def freeze_stages(encoder: DiscEncoder, stages: Iterable[str]) -> List[str]:
    """Turn off gradients for the named stages; returns the names frozen."""
    frozen = []
    for name in stages:
        for param in encoder.stage(name).parameters():
            param.requires_grad_(False)
        frozen.append(name)
    return frozen


def hold_frozen_batchnorm(encoder: DiscEncoder, stages: Iterable[str]) -> None:
    """Keep BatchNorm running statistics of frozen stages fixed.

    Call after every model.train().
    """
    for name in stages:
        for module in encoder.stage(name).modules():
            if isinstance(module, nn.modules.batchnorm._BatchNorm):
                module.eval()


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def build_finetune_param_groups(
    encoder: DiscEncoder,
    head: nn.Module,
    backbone_lr: float = 5e-5,
    head_lr: float = 5e-4,
    frozen: Sequence[str] = DEFAULT_FROZEN,
) -> List[Dict[str, Any]]:
    """Freeze the named stages and return one param group per trainable block.

    Every unfrozen encoder stage goes into a single backbone group at
    backbone_lr; the head gets its own group at head_lr.
    """
    unknown = [s for s in frozen if s not in STAGE_NAMES]
    if unknown:
        raise ConfigError(
            f"unknown encoder stage(s) {unknown}; expected names from {STAGE_NAMES}"
        )
    freeze_stages(encoder, frozen)

    trainable_stages = [s for s in STAGE_NAMES if s not in frozen]
    backbone_params = [
        p for s in trainable_stages for p in encoder.stage(s).parameters()
    ]
    for param in backbone_params:
        param.requires_grad_(True)

    groups: List[Dict[str, Any]] = []
    if backbone_params:
        groups.append(
            {"name": "backbone", "params": backbone_params, "lr": backbone_lr}
        )
    groups.append({"name": "head", "params": list(head.parameters()), "lr": head_lr})
    training = ", ".join(trainable_stages) or "head only"
    logger.info(
        f"🧊 Frozen: {', '.join(frozen) or 'none'}; training {training} "
        f"at {backbone_lr:g}, head at {head_lr:g}"
    )
    return groups


def build_optimizer(
    param_groups: List[Dict[str, Any]], config: OptimizerConfig
) -> torch.optim.Optimizer:
    if config.name == "adamw":
        return torch.optim.AdamW(
            param_groups, lr=config.lr, weight_decay=config.weight_decay
        )
    if config.name == "sgd":
        return torch.optim.SGD(
            param_groups,
            lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
    raise ConfigError(f"unknown optimizer {config.name!r}")


def base_lrs(optimizer: torch.optim.Optimizer) -> List[float]:
    return [float(g["lr"]) for g in optimizer.param_groups]


def lr_ratio(
    optimizer: torch.optim.Optimizer,
    numerator: str = "head",
    denominator: str = "backbone",
) -> Optional[float]:
    rates = {g.get("name"): g["lr"] for g in optimizer.param_groups}
    if numerator not in rates or denominator not in rates:
        return None
    return rates[numerator] / rates[denominator]
