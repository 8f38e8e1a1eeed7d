"""Flat ``section.key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from ltdlab.synthetic_data import SceneKind


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "mixed_segments"
    num_clips: int = 8
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    square_size: int = 12
    velocity: tuple = (1, 0)
    fast_velocity: tuple = (6, 4)
    boundaries: tuple = (4, 10)
    flicker_amplitude: float = 0.3
    flicker_period: float = 8.0


@dataclass
class EncoderSection:
    temporal_factor: int = 2
    spatial_factor: int = 4
    latent_channels: int = 4


@dataclass
class LtdSection:
    tau: int = 3
    norm: str = "l2"


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    time_dim: int = 16
    cond_dim: int = 8


@dataclass
class TrainSection:
    lr: float = 2e-5
    steps: int = 100
    batch_size: int = 4
    cond_dropout: float = 0.1
    mode: str = "both"
    checkpoint_every: int = 0


@dataclass
class ReportSection:
    window: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    ltd: LtdSection = field(default_factory=LtdSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> None:
        kinds = [k.strip() for k in self.data.kind.split(",")]
        for k in kinds:
            if k.upper() not in SceneKind.__members__:
                raise ConfigError(f"data.kind: unknown scene kind {k!r}")
        if self.data.num_clips < 1:
            raise ConfigError("data.num_clips must be >= 1")
        if self.train.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.train.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if not 0.0 <= self.train.cond_dropout <= 1.0:
            raise ConfigError("train.cond_dropout must lie in [0, 1]")
        if self.train.mode not in ("baseline", "ltd", "both"):
            raise ConfigError("train.mode must be baseline, ltd or both")
        if self.ltd.tau < 1:
            raise ConfigError("ltd.tau must be >= 1")
        if self.ltd.norm not in ("l1", "l2"):
            raise ConfigError("ltd.norm must be l1 or l2")
        if self.report.window < 1:
            raise ConfigError("report.window must be >= 1")

    @property
    def scene_kinds(self) -> list[SceneKind]:
        return [SceneKind[k.strip().upper()] for k in self.data.kind.split(",")]


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> None:
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        sub = getattr(target, p, None)
        if sub is None or not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        target = sub
    name = parts[-1]
    if name not in {f.name for f in dataclasses.fields(target)} or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw, getattr(target, name), key))


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        apply_setting(cfg, key, raw)
    return cfg


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse ``path`` (or defaults), apply overrides, then ``LTD_SEED``."""
    cfg = parse_config(Path(path).read_text()) if path is not None else ExperimentConfig()
    for k, v in (overrides or {}).items():
        apply_setting(cfg, k, v)
    env = os.environ.get("LTD_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"LTD_SEED must be an integer, got {env!r}") from None
    cfg.validate()
    return cfg
