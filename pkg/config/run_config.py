"""
Run configuration for the training stages.

Defaults depend on (stage, preset). A config file (JSON or TOML) may hold
top-level keys shared by every stage plus per-stage sections named after the
stage; precedence is CLI flags > config file > built-in defaults.
"""

import copy
import json
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from processing.augmentation import AugmentPolicy
from processing.preprocessing import PreprocessConfig
from training.losses import FocalParams
from utils.exceptions import ConfigError
from utils.file_manager import json_sha256

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    ROI = "roi"
    SCRATCH = "scratch"
    PROBE = "probe"


class Preset(str, Enum):
    STANDARD = "standard"
    TINY = "tiny"


CLASSIFIER_STAGES = (Stage.FINETUNE, Stage.SCRATCH, Stage.PROBE)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["adamw", "sgd"] = "adamw"
    lr: float = Field(default=1e-3, gt=0)
    head_lr: Optional[float] = Field(
        default=None, gt=0, description="classification head rate when it differs"
    )
    weight_decay: float = Field(default=1e-4, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)


class SchedulerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["cosine", "plateau"] = "cosine"
    mode: Literal["max", "min"] = "min"
    patience: int = Field(default=4, ge=0)
    factor: float = Field(default=0.5, gt=0, lt=1)
    min_delta: float = Field(default=1e-4, ge=0)
    eta_min: float = Field(default=0.0, ge=0)


class RegressorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    level_embedding_dim: int = Field(default=32, gt=0)
    fusion_hidden: int = Field(default=256, gt=0)
    dropout: float = Field(default=0.5, ge=0, lt=1)
    pretrained_backbone: bool = False


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: Stage
    preset: Preset = Preset.STANDARD
    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    clip_max_norm: Optional[float] = Field(
        default=1.0, gt=0, description="None disables clipping"
    )
    seed: int = 0
    views: int = Field(default=3, ge=2)
    temperature: float = Field(default=0.1, gt=0)
    focal: FocalParams = Field(default_factory=FocalParams)
    smooth_l1_beta: float = Field(default=1.0, gt=0)
    projection_hidden: int = Field(default=512, gt=0)
    projection_dim: int = Field(default=128, gt=0)
    frozen_stages: Tuple[str, ...] = ("stem", "layer1", "layer2", "layer3")
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    regressor: RegressorConfig = Field(default_factory=RegressorConfig)
    num_workers: int = Field(default=0, ge=0)
    eval_slices_per_disc: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.eval_slices_per_disc % 2 == 0:
            raise ValueError(
                "eval_slices_per_disc must be odd so the annotated slice "
                "sits in the middle"
            )
        if self.stage == Stage.FINETUNE and self.optimizer.head_lr is None:
            raise ValueError("finetune needs optimizer.head_lr")
        return self

    @property
    def selection_criterion(self) -> str:
        return {
            Stage.PRETRAIN: "val_loss",
            Stage.ROI: "val_rmse",
        }.get(self.stage, "val_balanced_accuracy")

    @classmethod
    def for_stage(
        cls,
        stage: Union[Stage, str],
        preset: Union[Preset, str] = Preset.STANDARD,
        **overrides,
    ) -> "RunConfig":
        values = stage_defaults(Stage(stage), Preset(preset))
        return cls.model_validate(deep_merge(values, overrides))


def stage_defaults(stage: Stage, preset: Preset) -> Dict[str, Any]:
    """Built-in defaults.

    The tiny preset shortens runs and shrinks inputs for CPU-scale work.
    """
    tiny = preset == Preset.TINY
    values: Dict[str, Any] = {"stage": stage.value, "preset": preset.value}
    if tiny:
        values["preprocess"] = {"model_input_size": 64, "regression_input_size": 128}

    if stage == Stage.PRETRAIN:
        values.update(
            epochs=8 if tiny else 60,
            batch_size=32,
            optimizer={"name": "adamw", "lr": 1e-3, "weight_decay": 1e-4},
            scheduler={"name": "cosine", "mode": "min"},
        )
    elif stage == Stage.FINETUNE:
        # tiny keeps the 10x head/backbone ratio at larger absolute rates
        backbone_lr = 5e-4 if tiny else 5e-5
        values.update(
            epochs=15 if tiny else 40,
            batch_size=24,
            optimizer={
                "name": "adamw",
                "lr": backbone_lr,
                "head_lr": backbone_lr * 10,
                "weight_decay": 1e-4,
            },
            scheduler={"name": "plateau", "mode": "max", "patience": 4, "factor": 0.5},
        )
    elif stage == Stage.SCRATCH:
        values.update(
            epochs=15 if tiny else 40,
            batch_size=24,
            optimizer={
                "name": "adamw",
                "lr": 2e-3 if tiny else 5e-4,
                "weight_decay": 1e-4,
            },
            scheduler={"name": "plateau", "mode": "max", "patience": 4, "factor": 0.5},
            frozen_stages=(),
        )
    elif stage == Stage.ROI:
        values.update(
            epochs=20 if tiny else 40,
            batch_size=32,
            optimizer={
                "name": "adamw",
                "lr": 1e-3 if tiny else 1e-4,
                "weight_decay": 0.01,
            },
            scheduler={"name": "plateau", "mode": "min", "patience": 3, "factor": 0.1},
        )
    elif stage == Stage.PROBE:
        values.update(
            epochs=60,
            batch_size=64,
            optimizer={"name": "adamw", "lr": 1e-2, "weight_decay": 0.0},
            scheduler={"name": "cosine", "mode": "max"},
        )
    return values


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON or TOML config file into a plain dict"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e


def resolve_run_config(
    stage: Union[Stage, str],
    file_values: Optional[Mapping[str, Any]] = None,
    cli_overrides: Optional[Mapping[str, Any]] = None,
    preset: Optional[Union[Preset, str]] = None,
) -> RunConfig:
    """Merge defaults < file (shared keys, then the stage's own section) < CLI flags."""
    stage = Stage(stage)
    file_values = dict(file_values or {})
    cli_overrides = {k: v for k, v in (cli_overrides or {}).items() if v is not None}
    section_names = {s.value for s in Stage}
    shared = {k: v for k, v in file_values.items() if k not in section_names}
    section = file_values.get(stage.value, {}) or {}

    if "stage" in shared and shared["stage"] != stage.value:
        raise ConfigError(
            f"config file is for stage {shared['stage']!r}, "
            f"command runs {stage.value!r}"
        )
    shared.pop("stage", None)

    chosen_preset = Preset(
        preset
        or cli_overrides.pop("preset", None)
        or section.get("preset")
        or shared.get("preset")
        or Preset.STANDARD
    )
    merged = stage_defaults(stage, chosen_preset)
    merged = deep_merge(merged, shared)
    merged = deep_merge(merged, section)
    merged = deep_merge(merged, cli_overrides)
    merged["stage"] = stage.value
    merged["preset"] = chosen_preset.value
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"invalid {stage.value} configuration: {e}") from e


def config_hash(config: RunConfig) -> str:
    return json_sha256(config.model_dump(mode="json"))
