"""
Checkpoint files: model weights in a safetensors container, with one JSON
metadata document in the header under the ``disc_grade`` key.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import torch
import torch.nn as nn
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from utils.exceptions import ConfigError, DataError, StageMismatchError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
METADATA_KEY = "disc_grade"


@dataclass
class CheckpointMeta:
    stage: str
    preset: str
    epoch: int
    config_hash: str
    metrics: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "stage": self.stage,
            "preset": self.preset,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "metrics": {k: _json_number(v) for k, v in self.metrics.items()},
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointMeta":
        data = json.loads(text)
        return cls(
            stage=data["stage"],
            preset=data["preset"],
            epoch=int(data["epoch"]),
            config_hash=data["config_hash"],
            metrics=data.get("metrics", {}),
            config=data.get("config", {}),
            format_version=int(data["format_version"]),
        )


def _json_number(value):
    # JSON has no NaN
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def save_checkpoint(
    path: Union[str, Path], modules: Dict[str, nn.Module], meta: CheckpointMeta
) -> Path:
    """Write the state dicts of the named modules, keys prefixed ``<name>.``"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, torch.Tensor] = {}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            tensors[f"{prefix}.{key}"] = value.detach().cpu().contiguous().clone()
    save_file(tensors, str(path), metadata={METADATA_KEY: meta.to_json()})
    logger.debug(f"💾 Saved {meta.stage} checkpoint (epoch {meta.epoch}) to {path}")
    return path


def read_checkpoint_meta(path: Union[str, Path]) -> CheckpointMeta:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            header = f.metadata() or {}
    except Exception as e:
        raise DataError(f"{path} is not a readable checkpoint: {e}") from e
    if METADATA_KEY not in header:
        raise DataError(f"{path} carries no {METADATA_KEY} metadata")
    meta = CheckpointMeta.from_json(header[METADATA_KEY])
    if meta.format_version != FORMAT_VERSION:
        raise DataError(
            f"{path} has checkpoint format {meta.format_version}, "
            f"expected {FORMAT_VERSION}"
        )
    return meta


def load_checkpoint(
    path: Union[str, Path],
    expected_stages: Optional[Iterable[str]] = None,
    expected_preset: Optional[str] = None,
):
    """Read metadata and tensors.

    The producing stage and preset are enforced when given.
    """
    meta = read_checkpoint_meta(path)
    if expected_stages is not None:
        allowed = sorted(expected_stages)
        if meta.stage not in allowed:
            raise StageMismatchError(
                f"checkpoint {path} was produced by stage {meta.stage!r}; "
                f"expected {' or '.join(allowed)}"
            )
    if expected_preset is not None and meta.preset != expected_preset:
        raise StageMismatchError(
            f"checkpoint {path} uses preset {meta.preset!r} "
            f"but this run is configured for {expected_preset!r}"
        )
    return meta, load_file(str(path))


def restore_module(
    module: nn.Module, tensors: Dict[str, torch.Tensor], prefix: str
) -> None:
    """Load ``<prefix>.*`` tensors into module; every key must match."""
    marker = f"{prefix}."
    state = {k[len(marker) :]: v for k, v in tensors.items() if k.startswith(marker)}
    if not state:
        raise ConfigError(f"checkpoint holds no weights for {prefix!r}")
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint weights for {prefix!r} do not fit the model "
            f"(missing {list(missing)[:5]}, unexpected {list(unexpected)[:5]})"
        )
