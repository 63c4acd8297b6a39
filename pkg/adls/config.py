"""Run configuration: pydantic defaults, overridable from a flat YAML file."""

from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator

from adls.errors import ConfigError
from adls.models import Scenario

CONFIG_FILENAME = "adls.yaml"


class RunConfig(BaseModel):
    """Algorithm settings shared by training, completion and the benchmark."""
    scenario: Scenario = Scenario.RGBD
    trees_per_phase_forest: int = Field(default=40, ge=2)
    trees_final: int = Field(default=500, ge=1)
    pixels_per_image_subsample: int = Field(default=2048, ge=1)
    neighbors: int = Field(default=3, ge=1)
    noise_sigma: float | None = Field(default=None, ge=0)
    crop: tuple[int, int] | None = None       # (width, height)
    sub_phases: int = Field(default=1, ge=1)  # variance recalculations per phase
    max_features: int | None = Field(default=None, ge=1)
    threads: int = Field(default=1, ge=1)

    @field_validator("crop", mode="before")
    @classmethod
    def _parse_crop(cls, value: Any) -> Any:
        if isinstance(value, str):
            return parse_crop(value)
        return value

    @field_validator("crop")
    @classmethod
    def _positive_crop(cls, value: tuple[int, int] | None) -> tuple[int, int] | None:
        if value is not None and min(value) <= 0:
            raise ValueError("crop dimensions must be positive")
        return value


def parse_crop(text: str) -> tuple[int, int]:
    """Parse a `WxH` crop size."""
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"crop must look like 1216x352, got {text!r}") from exc
    return width, height


def load_config(path: Path | None = None) -> RunConfig:
    """Load config from a YAML file, falling back to defaults."""
    if path is None:
        return RunConfig()
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file must hold a key: value mapping: {path}")
    try:
        return RunConfig(**raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Return a copy with every non-None override applied; flags win over the file."""
    updates = {key: value for key, value in overrides.items() if value is not None}
    if not updates:
        return config
    try:
        return RunConfig(**{**config.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_yaml(config: RunConfig) -> str:
    data = config.model_dump(mode="json")
    return yaml.safe_dump(data, default_flow_style=None, sort_keys=False)


def init_config(path: Path) -> Path:
    """Write the default config to `path` if nothing is there yet."""
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_yaml(RunConfig()))
    return path
