"""Run configuration: one section-scoped file, strict keys, dotted overrides."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .data import EXPRESSIONS
from .denoiser import DenoiserConfig
from .errors import ConfigError, DataIOError
from .training import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    manifest: Optional[str] = None
    split: Literal["train", "test"] = "train"
    n_subjects: int = 2
    n_frames: int = 32
    high_res: int = 192
    low_res: int = 64
    expressions: list[str] = list(EXPRESSIONS)
    train_fraction: float = 0.75
    clip_frames: Optional[int] = None
    max_clips: Optional[int] = None


class ModelSection(_Section):
    hidden_channels: int = 128
    channel_multipliers: list[int] = [1, 1, 2, 2, 4, 8]
    res_blocks_per_level: int = 1
    attention_levels: list[int] = [5]
    expression_injection_level: int = 5
    timestep_embedding_dim: int = 128
    attention_heads: int = 4
    expression_encoder_channels: int = 64
    use_expression_encoder: bool = True
    use_previous_frame: bool = True
    noise_previous_frame: bool = True
    previous_noise_scale: float = 1.0


class TrainSection(_Section):
    epochs: int = 400
    max_steps: Optional[int] = None
    learning_rate: float = 2e-5
    batch_size: int = 4
    ema_decay: float = 0.9999
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_interval: int = 1000
    optimizer: Literal["adam", "adamw"] = "adam"
    grad_clip: Optional[float] = None
    resume: Optional[str] = None


class InferSection(_Section):
    checkpoint: Optional[str] = None
    use_ema: bool = True
    stride: int = 1


class MetricsSection(_Section):
    content_embedder: Literal["pixel", "randproj"] = "pixel"
    video_embedder: Literal["pixel", "randproj"] = "randproj"
    randproj_dim: int = 16
    randproj_pool: int = 16
    randproj_seed: int = 0


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    infer: InferSection = InferSection()
    metrics: MetricsSection = MetricsSection()

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(image_size=self.data.high_res, low_res_size=self.data.low_res, **self.model.model_dump())

    def train_config(self) -> TrainConfig:
        d = self.train.model_dump(exclude={"resume"})
        return TrainConfig(seed=self.seed, **d)

    def dump(self, path: Path) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(yaml.safe_dump(self.model_dump(), sort_keys=False))
        except OSError as e:
            raise DataIOError(f"cannot write resolved config {path}: {e}") from e
        return path


# small desk-scale setup used by the acceptance suite and the README walkthrough
TOY_PRESET: dict[str, Any] = {
    "data": {"n_subjects": 2, "n_frames": 8, "high_res": 32, "low_res": 8},
    "model": {
        "hidden_channels": 32,
        "channel_multipliers": [1, 2, 4],
        "attention_levels": [3],
        "expression_injection_level": 3,
        "timestep_embedding_dim": 32,
        "expression_encoder_channels": 32,
    },
    "train": {
        "max_steps": 2000,
        "learning_rate": 1e-3,
        "batch_size": 4,
        "ema_decay": 0.995,
        "diffusion_steps": 50,
        "checkpoint_interval": 500,
    },
}

PRESETS = {"full": {}, "toy": TOY_PRESET}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    """``"train.max_steps=200"`` -> ``{"train": {"max_steps": 200}}``."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r}: expected section.key=value")
    value = yaml.safe_load(raw) if raw else None
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: list[dict] | None = None) -> RunConfig:
    """Merge preset, file, then overrides (later wins) and validate."""
    raw: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown {preset!r}, choose from {sorted(PRESETS)}")
        raw = _merge(raw, PRESETS[preset])
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise DataIOError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge(raw, loaded)
    for o in overrides or []:
        raw = _merge(raw, o)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from e
