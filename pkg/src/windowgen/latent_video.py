"""Frame autoencoder, causal temporal compressor and latent replacement.

Latents are channel-last: a clip of N frames at H x W maps to (N, H/8, W/8, 16)
per frame, and the compressor folds every four frames after the first into
one latent frame, giving n = 1 + (N - 1) / 4.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_CHANNELS = 16
DOWNSAMPLE = 8
GROUP = 4


def compressed_length(n_frames: int) -> int:
    if n_frames < 1 or (n_frames - 1) % GROUP:
        raise ValueError(f"frame count {n_frames} must satisfy N = 1 (mod {GROUP})")
    return 1 + (n_frames - 1) // GROUP


def frame_map(n_frames: int) -> list[list[int]]:
    """Pixel-frame indices summarized by each latent frame."""
    n = compressed_length(n_frames)
    return [[0]] + [list(range(1 + GROUP * (j - 1), 1 + GROUP * j)) for j in range(1, n)]


def group_last_frames(n_frames: int) -> list[int]:
    return [g[-1] for g in frame_map(n_frames)]


@dataclass
class LatentClip:
    data: torch.Tensor               # (n, h, w, c)
    frame_map: list[list[int]]


@dataclass
class SpatiotemporalCondition:
    z_st: LatentClip
    replaced_index: list[int]
    visibility: Optional[torch.Tensor] = None   # (N, h, w)


class _Res(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


class FrameAutoencoder(nn.Module):
    """Deterministic 8x spatial autoencoder with standardized latents."""

    def __init__(self, widths: Sequence[int] = (32, 64, 96), latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        w1, w2, w3 = widths
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w1, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w2, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w2, w3, 4, stride=2, padding=1), _Res(w3), nn.SiLU(),
            nn.Conv2d(w3, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, w3, 3, padding=1), _Res(w3), nn.SiLU(),
            nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(w1, w1, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, 3, 3, padding=1),
        )
        self.register_buffer("latent_mean", torch.zeros(latent_channels))
        self.register_buffer("latent_std", torch.ones(latent_channels))

    def encode_raw(self, frames: torch.Tensor) -> torch.Tensor:
        n, h, w, _ = frames.shape
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"frame size {h}x{w} must be divisible by {DOWNSAMPLE}")
        return self.encoder(frames.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, H, W, 3) -> standardized latents (N, H/8, W/8, c)."""
        return (self.encode_raw(frames) - self.latent_mean) / self.latent_std

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        z = latents * self.latent_std + self.latent_mean
        return self.decoder(z.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    @torch.no_grad()
    def calibrate(self, frames: torch.Tensor, batch: int = 64) -> None:
        """Set latent statistics so encoded training frames are ~unit variance."""
        z = torch.cat([self.encode_raw(frames[i:i + batch]) for i in range(0, len(frames), batch)])
        z = z.reshape(-1, z.shape[-1])
        self.latent_mean.copy_(z.mean(0))
        self.latent_std.copy_(z.std(0).clamp(min=1e-4))


def ae_encode(ae: FrameAutoencoder, frames: torch.Tensor) -> torch.Tensor:
    return ae.encode(frames)


def ae_decode(ae: FrameAutoencoder, latents: torch.Tensor) -> torch.Tensor:
    return ae.decode(latents)


class CausalCompressor(nn.Module):
    """Temporal 4x compressor: frame 0 passes through a per-frame map, every
    later group of four frames is folded by a stride-4 temporal convolution.
    Latent j never sees frames after its own group."""

    def __init__(self, channels: int = LATENT_CHANNELS, hidden: int = 64):
        super().__init__()
        self.first = nn.Sequential(nn.Conv2d(channels, hidden, 3, padding=1), nn.SiLU(),
                                   nn.Conv2d(hidden, channels, 3, padding=1))
        self.fold = nn.Conv3d(channels, hidden, (GROUP, 3, 3), stride=(GROUP, 1, 1),
                              padding=(0, 1, 1))
        self.mix = nn.Conv3d(hidden, channels, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, N, h, w, c) -> (B, n, h, w, c)."""
        b, n_frames, h, w, c = frames.shape
        compressed_length(n_frames)
        x = frames.permute(0, 4, 1, 2, 3)                       # B c N h w
        first = x[:, :, 0] + self.first(x[:, :, 0])              # B c h w
        out = [first[:, :, None]]
        if n_frames > 1:
            rest = x[:, :, 1:]
            skip = rest[:, :, GROUP - 1::GROUP]
            out.append(skip + self.mix(F.silu(self.fold(rest))))
        return torch.cat(out, dim=2).permute(0, 2, 3, 4, 1)


def causal_compress(ccn: CausalCompressor, features: torch.Tensor) -> LatentClip:
    """Rendered features (N, h, w, c) -> z_spat as a LatentClip."""
    data = ccn(features[None])[0]
    return LatentClip(data, frame_map(features.shape[0]))


def temporal_replace(z_spat: LatentClip, z_temp: torch.Tensor, latent_index: int = 0,
                     visibility: Optional[torch.Tensor] = None) -> SpatiotemporalCondition:
    """Overwrite one latent frame of z_spat with an encoded conditioning frame."""
    n = z_spat.data.shape[0]
    if not 0 <= latent_index < n:
        raise ValueError(f"latent index {latent_index} outside clip of {n} latent frames")
    data = z_spat.data.clone()
    data[latent_index] = z_temp.reshape(data.shape[1:])
    return SpatiotemporalCondition(LatentClip(data, z_spat.frame_map), [latent_index], visibility)


def duplicate_for_condition(poses: list, k: int):
    """Insert three copies of pose ``k`` so frames k..k+3 are static.

    Returns the extended pose list and the latent index that summarizes the
    static block. The block must coincide with one compression group and the
    extended list must keep N = 1 (mod 4).
    """
    if k == 0:
        return list(poses), 0
    if not 0 < k < len(poses):
        raise ValueError(f"conditioning frame {k} outside window of {len(poses)} poses")
    if (k - 1) % GROUP:
        raise ValueError(f"frame {k} does not start a compression group; "
                         f"valid indices are 1, 5, 9, ...")
    extended = list(poses[:k]) + [poses[k]] * 3 + list(poses[k:])
    compressed_length(len(extended))
    latent = 1 + (k - 1) // GROUP
    assert frame_map(len(extended))[latent] == list(range(k, k + GROUP))
    return extended, latent


def collapse_duplicates(frames, k: int):
    """Drop the three inserted frames after ``k`` (inverse of duplicate_for_condition)."""
    if k == 0:
        return frames
    return frames[:k + 1] + frames[k + 4:] if isinstance(frames, list) else \
        torch.cat([frames[:k + 1], frames[k + 4:]])
