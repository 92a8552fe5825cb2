"""Feed-forward reconstruction transformer over two posed views.

Each view contributes RGB, a scale-free depth prior and its Plücker rays
(10 channels). Patches of both views form one token sequence; the output is
a per-pixel raw distance (1 channel) and a latent-sized feature (16 channels).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (DEFAULT_FAR, DEFAULT_NEAR, CameraModel, FeaturePointCloud, Pose,
                       camera_rays, compute_plucker_map, distance_from_raw)

LRM_IN_CHANNELS = 10
LATENT_CHANNELS = 16


@dataclass(frozen=True)
class LrmConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    mlp: int = 512
    patch: int = 8
    image_size: tuple[int, int] = (64, 64)
    feature_channels: int = LATENT_CHANNELS

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"patch size {self.patch} must divide image size {self.image_size}")
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by head count")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ReconstructionModel(nn.Module):
    def __init__(self, config: LrmConfig = LrmConfig()):
        super().__init__()
        self.config = config
        p, d = config.patch, config.hidden
        gh, gw = config.image_size[0] // p, config.image_size[1] // p
        self.out_channels = 1 + config.feature_channels
        self.patch_embed = nn.Linear(p * p * LRM_IN_CHANNELS, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, gh * gw, d))
        self.norm_in = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp) for _ in range(config.layers))
        self.norm_out = nn.LayerNorm(d)
        self.unpatchify = nn.Linear(d, p * p * self.out_channels)
        init_weights(self)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
        nn.init.zeros_(self.unpatchify.weight)
        nn.init.zeros_(self.unpatchify.bias)

    def forward(self, x: torch.Tensor):
        """x: (B, V, H, W, 10) -> raw distance (B, V, H, W, 1), features (B, V, H, W, c)."""
        b, v, h, w, ch = x.shape
        p = self.config.patch
        if ch != LRM_IN_CHANNELS or h % p or w % p:
            raise ValueError(f"expected (B, V, H, W, {LRM_IN_CHANNELS}) with H, W divisible by "
                             f"{p}; got {tuple(x.shape)}")
        gh, gw = h // p, w // p
        if gh * gw != self.pos_embed.shape[1]:
            raise ValueError(f"image {h}x{w} does not match configured size "
                             f"{self.config.image_size}")
        depth = x[..., 3:4]
        # the depth prior is scale-free: normalize each view by its mean
        depth = depth / depth.mean(dim=(2, 3, 4), keepdim=True).clamp(min=1e-6)
        x = torch.cat([x[..., :3], depth, x[..., 4:]], dim=-1)
        tokens = x.reshape(b, v, gh, p, gw, p, ch).permute(0, 1, 2, 4, 3, 5, 6)
        tokens = tokens.reshape(b, v, gh * gw, p * p * ch)
        tokens = self.patch_embed(tokens) + self.pos_embed[:, None]
        tokens = self.norm_in(tokens.reshape(b, v * gh * gw, -1))
        for blk in self.blocks:
            tokens = blk(tokens)
        out = self.unpatchify(self.norm_out(tokens))
        out = out.reshape(b, v, gh, gw, p, p, self.out_channels).permute(0, 1, 2, 4, 3, 5, 6)
        out = out.reshape(b, v, h, w, self.out_channels)
        return out[..., :1], out[..., 1:]


def assemble_lrm_input(images: Sequence[np.ndarray], mono_depths: Sequence[np.ndarray],
                       cameras: Sequence[CameraModel], poses: Sequence[Pose]) -> np.ndarray:
    """Stack per-view [RGB(3), depth(1), ray direction(3), ray moment(3)] -> (V, H, W, 10)."""
    if len({tuple(c.as_vector()) for c in cameras}) != 1:
        raise ValueError("both views must share camera intrinsics")
    views = []
    for img, dep, cam, pose in zip(images, mono_depths, cameras, poses):
        img = np.asarray(img, dtype=np.float64)
        dep = np.asarray(dep, dtype=np.float64)
        if dep.ndim == 2:
            dep = dep[..., None]
        if img.shape[:2] != (cam.height, cam.width) or dep.shape[:2] != img.shape[:2]:
            raise ValueError(f"resolution mismatch: image {img.shape[:2]}, depth {dep.shape[:2]}, "
                             f"camera {(cam.height, cam.width)}")
        views.append(np.concatenate([img, dep, compute_plucker_map(cam, pose)], axis=-1))
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise ValueError(f"views have mismatched shapes {shapes}")
    return np.stack(views)


def regressed_depth(raw_distance: torch.Tensor, near: float = DEFAULT_NEAR,
                    far: float = DEFAULT_FAR) -> torch.Tensor:
    """Ray distance per pixel: near * (1 - sigmoid) + far * sigmoid."""
    return distance_from_raw(raw_distance, near, far)


def pool_to_grid(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(V, H, W, C) -> (V, H/p, W/p, C) by p x p average pooling."""
    v, h, w, c = x.shape
    return x.reshape(v, h // patch, patch, w // patch, patch, c).mean(dim=(2, 4))


def lrm_to_cloud(raw_distance: torch.Tensor, features: torch.Tensor,
                 cameras: Sequence[CameraModel], poses: Sequence[Pose], patch: int = 8,
                 near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> FeaturePointCloud:
    """Unproject pooled per-view outputs (V, H, W, *) along latent-grid rays."""
    dist = pool_to_grid(raw_distance, patch)
    feat = pool_to_grid(features, patch)
    v, h, w, c = feat.shape
    pts, ids = [], []
    for i, (cam, pose) in enumerate(zip(cameras, poses)):
        o, d = camera_rays(cam.scaled(1.0 / patch), pose)
        o = torch.as_tensor(o, dtype=dist.dtype)
        d = torch.as_tensor(d, dtype=dist.dtype)
        pts.append((o + d * distance_from_raw(dist[i], near, far)).reshape(-1, 3))
        ids.append(torch.full((h * w,), i, dtype=torch.int64))
    return FeaturePointCloud(torch.cat(pts), feat.reshape(-1, c), torch.cat(ids))
