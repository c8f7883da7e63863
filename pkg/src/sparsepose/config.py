"""Configuration dataclasses and YAML round-trip for the whole pipeline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import yaml

from .kcl import GatingConfig

# Attention spatial downscale factor per capturable block id.
ATTENTION_DOWNSCALE = {"enc.0": 1, "enc.1": 2, "enc.2": 4, "mid": 4}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    widths: tuple = (16, 32, 48)
    heads: int = 4
    norm_groups: int = 4
    time_dim: int = 64
    text_dim: int = 128
    context_len: int = 77
    seed_dim: int = 768
    spr_hidden: int = 256
    spr_channels: int = 3
    cond_resolution: int = 64
    init_seed: int = 0
    embed_seed: int = 0
    attention_source: str = "adapter"

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValueError("widths must list three encoder channel counts")
        for w in self.widths:
            if w % self.norm_groups != 0:
                raise ValueError(
                    f"width {w} not divisible by norm groups {self.norm_groups}"
                )
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        ratio = self.cond_resolution / self.image_size
        if self.cond_resolution % self.image_size != 0 or int(ratio) not in (1, 2, 4, 8):
            raise ValueError(
                "cond_resolution must be image_size times 1, 2, 4, or 8"
            )
        if self.attention_source not in ("base", "adapter"):
            raise ValueError("attention_source must be 'base' or 'adapter'")

    def attention_resolution(self, block_id: str) -> int:
        if block_id not in ATTENTION_DOWNSCALE:
            raise ValueError(f"unknown attention block {block_id!r}")
        return self.image_size // ATTENTION_DOWNSCALE[block_id]


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    lr: float = 1e-5
    prompt_drop_prob: float = 0.5
    drop_kpt_tokens_with_prompt: bool = True
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    heatmap_sigma: float = 2.0
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    dataset_size: int = 512
    dataset_seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 <= self.prompt_drop_prob <= 1:
            raise ValueError("prompt_drop_prob must be in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class SamplingConfig:
    steps: int = 50
    cfg_scale: float = 7.5
    cond_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0 or self.cond_scale < 0:
            raise ValueError("guidance scales must be >= 0")


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint: str = ""
    host: str = "127.0.0.1"
    port: int = 8701


@dataclass(frozen=True)
class FullConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def __post_init__(self):
        if self.gating.t_high > self.schedule.timesteps:
            raise ValueError("gate window exceeds the schedule length")
        resolutions = {
            self.model.attention_resolution(b) for b in self.gating.blocks
        }
        if len(resolutions) > 1:
            raise ValueError(
                "gated blocks must share one attention resolution, got "
                f"{sorted(resolutions)}"
            )

    def heatmap_size(self) -> tuple[int, int]:
        res = self.model.attention_resolution(next(iter(self.gating.blocks)))
        return (res, res)


def _to_plain(obj):
    d = asdict(obj)

    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(d)


def config_to_dict(cfg: FullConfig) -> dict:
    return _to_plain(cfg)


def save_config(cfg: FullConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(_to_plain(cfg), fh, sort_keys=True)


def _build(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def load_config(path) -> FullConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> FullConfig:
    return FullConfig(
        model=_build(ModelConfig, raw.get("model", {})),
        schedule=_build(ScheduleConfig, raw.get("schedule", {})),
        gating=_build(GatingConfig, raw.get("gating", {})),
        train=_build(TrainConfig, raw.get("train", {})),
        sampling=_build(SamplingConfig, raw.get("sampling", {})),
        service=_build(ServiceConfig, raw.get("service", {})),
    )
