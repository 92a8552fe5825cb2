"""Flat, typed run configuration loaded from JSON; unknown keys are errors."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .diffusion import DenoiserConfig
from .recon_model import LrmConfig


@dataclass(frozen=True)
class Config:
    image_size: int = 64
    fov_deg: float = 60.0
    window: int = 13
    near: float = 0.1
    far: float = 20.0
    scene_seed: int = 0
    trajectory_length: int = 97

    lrm_layers: int = 4
    lrm_hidden: int = 128
    lrm_heads: int = 4
    lrm_mlp: int = 512
    patch: int = 8

    ae_widths: tuple = (32, 64, 96)
    ccn_hidden: int = 64

    den_blocks: int = 4
    den_hidden: int = 96
    den_heads: int = 4
    den_mlp: int = 384

    diffusion_steps: int = 1000
    sample_steps: int = 50
    sample_min_alpha_bar: float = 0.0047   # sampling starts where signal is still present
    sample_clip: float = 5.0               # clamp on standardized clean-latent estimates

    lr: float = 4e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    lambda_depth: float = 0.05
    lambda_latent: float = 0.1
    lambda_diffusion: float = 1.0
    depth_views: int = 3

    ae_steps: int = 6000
    ae_batch: int = 8
    ae_lr: float = 2e-3
    backbone_steps: int = 3000
    warmup_stage_steps: int = 600
    intervals_stage_steps: int = 400
    joint_steps: int = 1500
    layout_steps: int = 800
    pin_last_prob: float = 0.25
    duplicate_prob: float = 0.25
    batch: int = 1
    noise_draws: int = 4                   # noise levels per window in conditioned stages

    def lrm_config(self) -> LrmConfig:
        return LrmConfig(self.lrm_layers, self.lrm_hidden, self.lrm_heads, self.lrm_mlp,
                         self.patch, (self.image_size, self.image_size))

    def denoiser_config(self) -> DenoiserConfig:
        lat = self.image_size // 8
        return DenoiserConfig(self.den_blocks, self.den_hidden, self.den_heads, self.den_mlp,
                              self.den_blocks // 2, (lat, lat))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    def replace(self, **kw) -> "Config":
        return validate(dict(self.to_dict(), **kw))


class ConfigError(ValueError):
    pass


def validate(raw: dict) -> Config:
    known = {f.name: f for f in fields(Config)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, val in raw.items():
        default = getattr(Config, key)
        if isinstance(default, bool):
            ok = isinstance(val, bool)
        elif isinstance(default, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(default, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
            val = float(val)
        elif isinstance(default, tuple):
            ok = isinstance(val, (list, tuple)) and all(isinstance(v, int) for v in val)
            val = tuple(val)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"config key {key!r} expects {type(default).__name__}, "
                              f"got {val!r}")
        values[key] = val
    cfg = Config(**values)
    if (cfg.window - 1) % 4:
        raise ConfigError(f"window length {cfg.window} must be 1 mod 4")
    if cfg.image_size % cfg.patch or cfg.image_size % 8:
        raise ConfigError("image size must be divisible by the patch size and by 8")
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    with open(Path(path)) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return validate(raw)
