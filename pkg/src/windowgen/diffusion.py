"""Latent video denoiser, ControlNet branch, noise schedule, losses and sampler."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .latent_video import LATENT_CHANNELS, frame_map
from .recon_model import Attention, Mlp, init_weights

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    alpha_bar: torch.Tensor   # (T,) float64, strictly decreasing in (0, 1]

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = [min(1 - f(i + 1) / f(i), max_beta) for i in range(T)]
        return cls(torch.cumprod(1 - torch.tensor(betas, dtype=torch.float64), 0))

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0]

    def ab(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        a = self.alpha_bar.to(like.dtype)[t]
        return a.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` per batch element."""
    t = torch.as_tensor(t).reshape(-1)
    if (t < 0).any() or (t >= schedule.T).any():
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    a = schedule.ab(t, z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


# --------------------------------------------------------------------------- networks

@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 4
    hidden: int = 96
    heads: int = 4
    mlp: int = 384
    control_blocks: int = 2
    latent_hw: tuple[int, int] = (8, 8)
    channels: int = LATENT_CHANNELS
    max_frames: int = 64

    def __post_init__(self):
        if self.control_blocks > self.blocks:
            raise ValueError("control block count cannot exceed block count")


def timestep_embedding(t: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(dtype)


class SpaceTimeBlock(nn.Module):
    """Spatial attention within each frame, temporal attention per location, MLP."""

    def __init__(self, dim: int, heads: int, mlp: int):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = Attention(dim, heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp)
        self.shift = nn.Linear(dim, 3 * dim)

    def forward(self, x, cond):
        b, f, s, d = x.shape
        s1, s2, s3 = self.shift(F.silu(cond))[:, None, None].chunk(3, dim=-1)
        x = x + self.attn_s((self.norm_s(x) + s1).reshape(b * f, s, d)).reshape(b, f, s, d)
        xt = (self.norm_t(x) + s2).transpose(1, 2).reshape(b * s, f, d)
        x = x + self.attn_t(xt).reshape(b, s, f, d).transpose(1, 2)
        return x + self.mlp(self.norm_m(x) + s3)


class _Embed(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.hidden
        self.in_proj = nn.Linear(cfg.channels, d)
        self.spatial_pos = nn.Parameter(torch.zeros(1, 1, cfg.latent_hw[0] * cfg.latent_hw[1], d))
        self.temporal_pos = nn.Parameter(torch.zeros(1, cfg.max_frames, 1, d))
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        # text pathway stand-in: one learned null prompt embedding
        self.null_text = nn.Parameter(torch.zeros(d))
        self.dim = d

    def forward(self, z, t):
        b, f, h, w, c = z.shape
        tokens = self.in_proj(z.reshape(b, f, h * w, c)) + self.spatial_pos + \
            self.temporal_pos[:, :f]
        cond = self.time_mlp(timestep_embedding(t, self.dim, z.dtype)) + self.null_text
        return tokens, cond


class VideoDenoiser(nn.Module):
    """epsilon-prediction transformer over latent clips (B, F, h, w, c)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = _Embed(cfg)
        self.blocks = nn.ModuleList(SpaceTimeBlock(cfg.hidden, cfg.heads, cfg.mlp)
                                    for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.channels)
        init_weights(self)
        for p in (self.embed.spatial_pos, self.embed.temporal_pos):
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                control_residuals: Optional[Sequence[Optional[torch.Tensor]]] = None):
        if z_t.dim() != 5 or z_t.shape[-1] != self.cfg.channels:
            raise ValueError(f"expected latents (B, F, h, w, {self.cfg.channels}), "
                             f"got {tuple(z_t.shape)}")
        b, f, h, w, c = z_t.shape
        if control_residuals is None:
            control_residuals = [None] * len(self.blocks)
        if len(control_residuals) != len(self.blocks):
            raise ValueError(f"need {len(self.blocks)} control residuals, "
                             f"got {len(control_residuals)}")
        x, cond = self.embed(z_t, t)
        for blk, res in zip(self.blocks, control_residuals):
            x = blk(x, cond)
            if res is not None:
                x = x + res
        return self.out(self.norm_out(x)).reshape(b, f, h, w, c)


def expand_groups(cond: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Repeat each compressed latent frame over the pixel frames of its group.

    cond: (B, n, h, w, c) -> (B, N, h, w, c). A condition already at N frames
    passes through unchanged.
    """
    if cond.shape[1] == n_frames:
        return cond
    groups = frame_map(n_frames)
    if len(groups) != cond.shape[1]:
        raise ValueError(f"condition has {cond.shape[1]} frames; {n_frames} pixel frames need "
                         f"{len(groups)}")
    idx = torch.tensor([j for j, g in enumerate(groups) for _ in g])
    return cond[:, idx]


class LayoutEncoder(nn.Module):
    """Per-frame encoder from layout maps (B, N, H, W, k) to latent-grid features."""

    def __init__(self, in_channels: int, channels: int = LATENT_CHANNELS, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, channels, 4, stride=2, padding=1))

    def forward(self, maps):
        b, n, h, w, k = maps.shape
        x = self.net(maps.reshape(b * n, h, w, k).permute(0, 3, 1, 2))
        return x.permute(0, 2, 3, 1).reshape(b, n, h // 8, w // 8, -1)


class ControlNet(nn.Module):
    """Trainable copy of the backbone's leading blocks with zero-initialized
    input and output projections, returning one residual per backbone block."""

    def __init__(self, backbone: VideoDenoiser, n_blocks: Optional[int] = None,
                 cond_encoder: Optional[nn.Module] = None):
        super().__init__()
        cfg = backbone.cfg
        self.n_total = cfg.blocks
        n_blocks = cfg.control_blocks if n_blocks is None else n_blocks
        self.embed = copy.deepcopy(backbone.embed)
        self.blocks = nn.ModuleList(copy.deepcopy(backbone.blocks[i]) for i in range(n_blocks))
        self.cond_encoder = cond_encoder
        self.cond_proj = nn.Linear(cfg.channels, cfg.hidden)
        self.out_projs = nn.ModuleList(nn.Linear(cfg.hidden, cfg.hidden) for _ in range(n_blocks))
        for lin in [self.cond_proj, *self.out_projs]:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, cond: torch.Tensor, z_t: torch.Tensor, t: torch.Tensor):
        """cond: (B, n|N, h, w, c) latent condition or (B, N, H, W, k) layout maps."""
        if self.cond_encoder is not None:
            cond = self.cond_encoder(cond)
        cond = expand_groups(cond, z_t.shape[1])
        if cond.shape != z_t.shape:
            raise ValueError(f"condition shape {tuple(cond.shape)} does not match latents "
                             f"{tuple(z_t.shape)}")
        b, f, h, w, c = z_t.shape
        x, tcond = self.embed(z_t, t)
        x = x + self.cond_proj(cond.reshape(b, f, h * w, c))
        residuals = []
        for blk, proj in zip(self.blocks, self.out_projs):
            x = blk(x, tcond)
            residuals.append(proj(x))
        return residuals

    def pad(self, residuals):
        return list(residuals) + [None] * (self.n_total - len(residuals))


@dataclass(frozen=True)
class ControlCombination:
    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("control weights must be nonnegative")


LAYOUT_STAGE1 = ControlCombination((0.5, 0.5))        # semantic, depth
LAYOUT_STAGE2 = ControlCombination((0.3, 0.3, 0.4))   # semantic, depth, scvg


def combine_controls(combo: ControlCombination, per_net: Sequence[Sequence]) -> list:
    """Elementwise weighted sum of residual lists from several control branches."""
    if len(combo.weights) != len(per_net):
        raise ValueError(f"{len(combo.weights)} weights for {len(per_net)} residual sets")
    lengths = {len(r) for r in per_net}
    if len(lengths) != 1:
        raise ValueError(f"residual lists have mismatched lengths {sorted(lengths)}")
    out = []
    for parts in zip(*per_net):
        if all(p is None for p in parts):
            out.append(None)
            continue
        acc = None
        for wgt, p in zip(combo.weights, parts):
            if p is None:
                continue
            acc = wgt * p if acc is None else acc + wgt * p
        out.append(acc)
    return out


# --------------------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossWeights:
    depth: float = 0.05
    latent: float = 0.1
    diffusion: float = 1.0

    def __post_init__(self):
        if min(self.depth, self.latent, self.diffusion) < 0:
            raise ValueError("loss weights must be nonnegative")


def normalize_inverse_depth(depth: torch.Tensor, mask: Optional[torch.Tensor] = None):
    """Min-max normalize 1/depth to [0, 1] using the (masked) extremes."""
    inv = 1.0 / depth
    sel = inv if mask is None else inv[mask]
    lo, hi = sel.min(), sel.max()
    return (inv - lo) / (hi - lo)


def depth_loss(rendered: torch.Tensor, reference: torch.Tensor,
               visibility: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scale-free inverse-depth loss summed over views and visible pixels.

    rendered, reference: (S, h, w) or (S, h, w, 1); visibility: (S, h, w) bool.
    """
    rendered = rendered.reshape(rendered.shape[0], -1)
    reference = reference.reshape(reference.shape[0], -1)
    if visibility is None:
        visibility = torch.ones_like(rendered, dtype=torch.bool)
    visibility = visibility.reshape(visibility.shape[0], -1)
    total = rendered.new_zeros(())
    for r, d, m in zip(rendered, reference, visibility):
        if int(m.sum()) < 2:
            log.warning("depth loss: view with %d visible pixels skipped", int(m.sum()))
            continue
        r_safe = torch.where(m, r, torch.ones_like(r))
        d_safe = torch.where(m, d, torch.ones_like(d))
        inv_r, inv_d = 1.0 / r_safe[m], 1.0 / d_safe[m]
        if float((inv_r.max() - inv_r.min()).detach()) == 0.0 or \
                float((inv_d.max() - inv_d.min()).detach()) == 0.0:
            log.warning("depth loss: constant inverse depth in a view, skipped")
            continue
        a = (inv_r - inv_r.min()) / (inv_r.max() - inv_r.min())
        b = (inv_d - inv_d.min()) / (inv_d.max() - inv_d.min())
        total = total + ((a - b) ** 2).sum()
    return total


def evenly_spaced(n_frames: int, count: int = 3) -> list[int]:
    if count >= n_frames:
        return list(range(n_frames))
    return [round(i * (n_frames - 1) / (count - 1)) for i in range(count)] if count > 1 else [0]


def latent_loss(z_spat: torch.Tensor, target: torch.Tensor,
                mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error over visible latent cells; z_spat, target (n, h, w, c), mask (n, h, w)."""
    sq = (z_spat - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask[..., None].to(sq.dtype)
    denom = m.sum() * sq.shape[-1]
    if float(denom) == 0:
        return sq.new_zeros(())
    return (sq * m).sum() / denom


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Squared error norm per sample, averaged over the batch."""
    return ((eps_hat - eps) ** 2).reshape(eps.shape[0], -1).sum(1).mean()


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    return (weights.depth * parts.get("depth", 0.0) + weights.latent * parts.get("latent", 0.0)
            + weights.diffusion * parts.get("diffusion", 0.0))


# --------------------------------------------------------------------------- sampling

def ddim_timesteps(schedule: NoiseSchedule, steps: int, min_alpha_bar: float = 0.0) -> list[int]:
    """Evenly spaced descending timesteps, starting at the last t with alpha_bar >= min_alpha_bar.

    Starting below the capped terminal step avoids amplifying noise-prediction
    error by 1/sqrt(alpha_bar) where the signal is numerically absent.
    """
    if steps < 1:
        raise ValueError("need at least one sampling step")
    ok = (schedule.alpha_bar >= min_alpha_bar).nonzero()
    if len(ok) == 0:
        raise ValueError(f"no timestep has alpha_bar >= {min_alpha_bar}")
    start = int(ok.max())
    ts = torch.linspace(start, 0, steps).round().long().tolist()
    return list(dict.fromkeys(ts))


@torch.no_grad()
def ddim_sample(eps_fn, shape, schedule: NoiseSchedule, steps: int = 50, seed: int = 0,
                dtype=torch.float32, clip: float = 5.0,
                min_alpha_bar: float = 0.0) -> torch.Tensor:
    """Deterministic DDIM (eta = 0). ``eps_fn(z_t, t)`` returns predicted noise.

    Clean-latent estimates are clamped to [-clip, clip] at every step.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)
    ts = ddim_timesteps(schedule, steps, min_alpha_bar)
    x0 = x
    for i, t in enumerate(ts):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        a = schedule.alpha_bar[t].to(dtype)
        eps = eps_fn(x, tt)
        x0 = ((x - (1 - a).sqrt() * eps) / a.sqrt()).clamp(-clip, clip)
        if i + 1 < len(ts):
            a_prev = schedule.alpha_bar[ts[i + 1]].to(dtype)
            eps = (x - a.sqrt() * x0) / (1 - a).sqrt()
            x = a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps
    return x0
