"""
Configuration module for the scale-then-compress toolkit.
"""

import json
import logging
import os
import re
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

_POLICY_PATTERN = re.compile(r"^(first-fit|ffd:[1-9][0-9]*)$")


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class S2Config(_StrictModel):
    """Dynamic-S2 geometry: tile size, scale set and largest-scale tile bounds"""

    tile_side: int = Field(default=448, ge=1)
    scale_factors: List[int] = Field(default_factory=lambda: [1, 2, 3])
    max_tiles_largest_scale: int = Field(default=12, ge=1)
    min_tiles_largest_scale: int = Field(default=1, ge=1)
    feature_side: int = Field(default=32, ge=1)

    @field_validator("scale_factors")
    @classmethod
    def _check_scales(cls, value: List[int]) -> List[int]:
        if not value or value[0] != 1:
            raise ValueError("scale_factors must start with 1")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("scale_factors must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _check_tile_bounds(self) -> "S2Config":
        if self.min_tiles_largest_scale > self.max_tiles_largest_scale:
            raise ValueError("min_tiles_largest_scale must not exceed max_tiles_largest_scale")
        return self


class EncoderConfig(_StrictModel):
    """Tile encoder choice; only the deterministic toy encoder ships"""

    kind: Literal["toy-patch"] = "toy-patch"
    channels: int = Field(default=8, ge=1)
    seed: int = 0


class QuantSpec(_StrictModel):
    """Numeric format and scale granularity of a simulated quantizer"""

    format: Literal["int8-symmetric", "int4-group", "fp8-e4m3"]
    granularity: Literal["per-tensor", "per-channel", "per-group"] = "per-channel"
    group_size: Optional[int] = Field(default=None, ge=1)
    # Axis holding channels; per-group units run along the last axis.
    channel_axis: int = -1
    fp8_scaling: Literal["none", "amax"] = "none"

    @model_validator(mode="after")
    def _check_granularity(self) -> "QuantSpec":
        if self.format == "int4-group" and self.granularity != "per-group":
            raise ValueError("int4-group requires per-group granularity")
        if self.granularity == "per-group" and self.group_size is None:
            raise ValueError("per-group granularity requires group_size")
        if self.granularity != "per-group" and self.group_size is not None:
            raise ValueError("group_size is only meaningful for per-group granularity")
        return self

    @property
    def bits(self) -> int:
        return 4 if self.format == "int4-group" else 8

    @classmethod
    def w8a8(cls, granularity: str = "per-channel") -> "QuantSpec":
        return cls(format="int8-symmetric", granularity=granularity)

    @classmethod
    def w4a16(cls, group_size: int = 128) -> "QuantSpec":
        return cls(format="int4-group", granularity="per-group", group_size=group_size)


class EncoderShape(_StrictModel):
    """Vision-tower shape; defaults follow a SigLIP-so400m style encoder at 448px"""

    layers: int = Field(default=27, ge=1)
    hidden: int = Field(default=1152, ge=1)
    intermediate: int = Field(default=4304, ge=1)
    tokens_per_tile: int = Field(default=1024, ge=1)


class ModelShape(_StrictModel):
    """Language-model shape used by the cost model (Qwen2-7B style defaults)"""

    layers: int = Field(default=28, ge=1)
    hidden: int = Field(default=3584, ge=1)
    heads: int = Field(default=28, ge=1)
    vocab: int = Field(default=152064, ge=1)
    intermediate: int = Field(default=18944, ge=1)
    encoder: EncoderShape = Field(default_factory=EncoderShape)

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelShape":
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        return self


class PruningConfig(_StrictModel):
    aggregation: Literal["mean", "sum"] = "mean"
    k_clusters: int = Field(default=8, ge=1)
    max_iterations: int = Field(default=100, ge=1)
    tolerance: float = Field(default=1e-6, ge=0.0)
    n_init: int = Field(default=5, ge=1)
    # Scores within this distance of zero count as uninformative
    delta_tolerance: float = Field(default=0.05, ge=0.0)


class PackingConfig(_StrictModel):
    capacity: int = Field(default=1024, ge=1)
    policy: str = "first-fit"
    max_open_contexts: Optional[int] = Field(default=64, ge=1)

    @field_validator("policy")
    @classmethod
    def _check_policy(cls, value: str) -> str:
        if not _POLICY_PATTERN.match(value):
            raise ValueError("policy must be 'first-fit' or 'ffd:W' with W >= 1")
        return value


class PipelineConfig(_StrictModel):
    """Everything a CLI run needs, loadable from one JSON file"""

    s2: S2Config = Field(default_factory=S2Config)
    stc_block: int = Field(default=3, ge=1)
    temporal_pool_ratio: int = Field(default=4, ge=1)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    quant: QuantSpec = Field(default_factory=QuantSpec.w8a8)
    model: ModelShape = Field(default_factory=ModelShape)
    pruning: PruningConfig = Field(default_factory=PruningConfig)
    packing: PackingConfig = Field(default_factory=PackingConfig)


class ToolkitSettings(BaseModel):
    """Process-wide settings taken from the environment"""

    model_config = ConfigDict(validate_assignment=True)

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "WARNING"
    show_progress: bool = False
    encode_workers: int = Field(default=1, ge=1)

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper_level(cls, value):
        return value.strip().upper() if isinstance(value, str) else value

    @field_validator("show_progress", mode="before")
    @classmethod
    def _parse_flag(cls, value):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes")
        return value


# Settings field -> environment variable
SETTINGS_ENV = {
    "log_level": "STC_LOG_LEVEL",
    "show_progress": "STC_SHOW_PROGRESS",
    "encode_workers": "STC_ENCODE_WORKERS",
}


def settings_from_env() -> ToolkitSettings:
    """
    Validate the STC_* environment variables.

    Returns:
        ToolkitSettings: settings with unset variables left at their defaults

    Raises:
        ConfigError: a variable fails validation; the message names it
    """
    raw = {field: os.environ[name] for field, name in SETTINGS_ENV.items() if name in os.environ}
    try:
        return ToolkitSettings.model_validate(raw)
    except ValidationError as e:
        problems = [f"{SETTINGS_ENV.get(str(item['loc'][0]), item['loc'][0])}: {item['msg']}" for item in e.errors()]
        raise ConfigError(f"Invalid environment settings: {'; '.join(problems)}") from e


def reload_settings() -> ToolkitSettings:
    """Re-read the environment into the shared settings object"""
    fresh = settings_from_env()
    for name in ToolkitSettings.model_fields:
        setattr(settings, name, getattr(fresh, name))
    return settings

def _describe_validation_error(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems.append(f"{location}: {item['msg']}")
    return "; ".join(problems)


def load_pipeline_config(path: Optional[str]) -> PipelineConfig:
    """
    Load and validate a pipeline configuration file.

    Args:
        path: JSON file path, or None for the defaults

    Returns:
        PipelineConfig: validated configuration
    """
    if path is None:
        return PipelineConfig()

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")

    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {_describe_validation_error(e)}") from e


# Create a global instance of the settings
settings = ToolkitSettings()
try:
    reload_settings()
except ConfigError as e:
    # The CLI reloads strictly and exits with a configuration error
    logger.warning("%s; using defaults", e)
