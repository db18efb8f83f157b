"""
Learning-rate schedules.

Both schedules are closed-form or pure state transitions so the learning rate
recorded for every epoch can be recomputed independently of the optimizer.
"""

import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Literal, Optional

import torch

Mode = Literal["max", "min"]


def cosine_lr(
    base_lr: float, epoch: int, total_epochs: int, eta_min: float = 0.0
) -> float:
    """eta_min + (base - eta_min)(1 + cos(pi * epoch / total)) / 2.

    The epoch is counted from 0.
    """
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    cos = math.cos(math.pi * epoch / total_epochs)
    return eta_min + (base_lr - eta_min) * (1.0 + cos) / 2.0


@dataclass(frozen=True)
class PlateauState:
    """Scheduler memory. ``scale`` multiplies every param group's base rate."""

    scale: float = 1.0
    best: Optional[float] = None
    num_bad_epochs: int = 0
    num_reductions: int = 0

    def lr(self, base_lr: float) -> float:
        return base_lr * self.scale


def _improved(
    metric: float, best: Optional[float], mode: Mode, min_delta: float
) -> bool:
    if best is None:
        return not math.isnan(metric)
    if math.isnan(metric):
        return False
    if mode == "max":
        return metric > best + min_delta
    return metric < best - min_delta


def plateau_step(
    state: PlateauState,
    metric: float,
    mode: Mode = "max",
    patience: int = 4,
    factor: float = 0.5,
    min_delta: float = 1e-4,
) -> PlateauState:
    """Feed one epoch's metric; the rate is cut once the counter exceeds patience."""
    if not 0.0 < factor < 1.0:
        raise ValueError(f"factor must lie in (0, 1), got {factor}")
    metric = float(metric)
    if _improved(metric, state.best, mode, min_delta):
        return replace(state, best=metric, num_bad_epochs=0)
    bad = state.num_bad_epochs + 1
    if bad > patience:
        return replace(
            state,
            scale=state.scale * factor,
            num_bad_epochs=0,
            num_reductions=state.num_reductions + 1,
        )
    return replace(state, num_bad_epochs=bad)


def replay_plateau(metrics: Iterable[float], base_lr: float, **kwargs) -> List[float]:
    """Learning rate in effect for each epoch.

    Each rate depends only on the metrics of the epochs before it.
    """
    state = PlateauState()
    rates = []
    for metric in metrics:
        rates.append(state.lr(base_lr))
        state = plateau_step(state, metric, **kwargs)
    return rates


def set_group_lrs(optimizer: torch.optim.Optimizer, lrs: List[float]) -> None:
    if len(lrs) != len(optimizer.param_groups):
        raise ValueError(
            f"{len(lrs)} rates for {len(optimizer.param_groups)} param groups"
        )
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr
