#!/usr/bin/env python3
"""
Run configuration.

A TrainConfig is assembled from four layers, later ones winning:
built-in defaults < MLTN_* environment variables (a .env file is honoured)
< an INI config file with [model] / [train] / [data] sections < CLI flags.
"""

import configparser
import os
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from tn_model import FeatureMap, plan_lotenet, plan_mltn

load_dotenv()

MLTN_LR = 5e-6
DEFAULT_LR = 5e-4

SECTIONS: Dict[str, List[str]] = {
    "model": [
        "model", "strides", "bond_dim", "class_count", "feature_map", "output_site",
        "init_noise", "calibrate_init", "lotenet_channels", "mlp_widths", "bn_momentum", "bn_eps",
    ],
    "train": [
        "batch_size", "lr", "max_epochs", "patience", "folds", "val_fold", "seed", "clip_norm",
        "out_dir", "progress",
    ],
    "data": [
        "data_source", "images_path", "labels_path", "synth_count", "synth_height", "synth_width",
        "bench_images", "bench_size",
    ],
}

ENV_KEYS = {
    "MLTN_OUT_DIR": "out_dir",
    "MLTN_SEED": "seed",
    "MLTN_PROGRESS": "progress",
    "MLTN_BATCH_SIZE": "batch_size",
    "MLTN_MAX_EPOCHS": "max_epochs",
}


def _int_list(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return [int(p) for p in parts if p]
    return value


IntList = Annotated[List[int], BeforeValidator(_int_list)]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # model
    model: Literal["mltn", "lotenet", "tenetx", "mlp"] = "mltn"
    strides: IntList = Field(default_factory=lambda: [2, 2])
    bond_dim: int = Field(5, ge=1)
    class_count: int = Field(2, ge=2)
    feature_map: Optional[FeatureMap] = None
    output_site: Optional[int] = Field(None, ge=0)
    init_noise: float = Field(1e-2, ge=0.0)
    calibrate_init: bool = True
    lotenet_channels: int = Field(4, ge=1)
    mlp_widths: IntList = Field(default_factory=lambda: [32, 16, 8])
    bn_momentum: float = Field(0.1, gt=0.0, lt=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    # train
    batch_size: int = Field(512, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(10, ge=1)
    folds: int = Field(5, ge=2)
    val_fold: int = Field(0, ge=0)
    seed: int = 0
    clip_norm: Optional[float] = Field(None, gt=0.0)
    out_dir: str = "runs"
    progress: bool = True

    # data
    data_source: Literal["synth", "idx"] = "synth"
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    synth_count: int = Field(640, ge=2)
    synth_height: int = Field(16, ge=8)
    synth_width: int = Field(16, ge=8)
    bench_images: int = Field(64, ge=1)
    bench_size: int = Field(64, ge=8)

    @field_validator("strides", "mlp_widths")
    @classmethod
    def _positive_entries(cls, value: List[int]) -> List[int]:
        if not value or any(v < 1 for v in value):
            raise ValueError(f"needs at least one entry, all >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _cross_checks(self) -> "TrainConfig":
        if self.val_fold >= self.folds:
            raise ValueError(f"val_fold {self.val_fold} must be < folds {self.folds}")
        if self.data_source == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("data_source = idx needs images_path and labels_path")
        return self

    @property
    def resolved_feature_map(self) -> FeatureMap:
        if self.feature_map is not None:
            return self.feature_map
        return FeatureMap.SQUEEZE if self.model == "mltn" else FeatureMap.SINUSOIDAL

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return MLTN_LR if self.model == "mltn" else DEFAULT_LR

    @property
    def effective_strides(self) -> List[int]:
        return [1] if self.model == "tenetx" else list(self.strides)

    def validate_for(self, height: int, width: int) -> None:
        """Check the dimension chain for this image size before any training starts."""
        local_dim = self.resolved_feature_map.local_dim
        if self.model in ("mltn", "tenetx"):
            plan_mltn(height, width, self.effective_strides, self.class_count, local_dim)
        elif self.model == "lotenet":
            plan_lotenet(height, width, self.strides, self.class_count, local_dim, self.lotenet_channels)

    def with_overrides(self, **changes: Any) -> "TrainConfig":
        return _validated({**self.model_dump(exclude_none=True), **changes})


def _validated(values: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(dict(values))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def _ini_parser() -> configparser.ConfigParser:
    # paths may contain %
    return configparser.ConfigParser(interpolation=None)


def _ini_values(parser: configparser.ConfigParser, source: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            if value.strip():
                values[key] = value.strip()
    return values


def config_from_ini_text(text: str, source: str = "<config>") -> TrainConfig:
    parser = _ini_parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    return _validated(_ini_values(parser, source))


def config_to_ini(config: TrainConfig) -> str:
    """Serialise every non-default-None field as INI text; config_from_ini_text inverts it."""
    dumped = config.model_dump(mode="json")
    lines: List[str] = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = dumped[key]
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """Merge defaults, MLTN_* environment, an optional INI file and CLI overrides."""
    env = os.environ if env is None else env
    values: Dict[str, Any] = {field: env[name] for name, field in ENV_KEYS.items() if env.get(name)}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = _ini_parser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        values.update(_ini_values(parser, str(path)))

    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return _validated(values)
