"""Model container, conditioning pipeline, staged training and clip sampling."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import GROUPS, Checkpoint, load_group_into, module_to_group
from .config import Config, validate
from .data import ClipRecord, WindowSample, sample_window
from .diffusion import (ControlCombination, ControlNet, LayoutEncoder, LossWeights,
                        NoiseSchedule, VideoDenoiser, combine_controls, ddim_sample, depth_loss,
                        diffusion_loss, evenly_spaced, latent_loss, q_sample, total_loss)
from .geometry import (CameraModel, FeaturePointCloud, RenderedCondition, splat_render,
                       unproject_depth)
from .latent_video import (CausalCompressor, FrameAutoencoder, LatentClip,
                           SpatiotemporalCondition, causal_compress, compressed_length,
                           frame_map, group_last_frames, temporal_replace)
from .recon_model import ReconstructionModel, assemble_lrm_input, lrm_to_cloud, pool_to_grid
from .scene_synth import CLASS_NAMES

log = logging.getLogger(__name__)

STAGES = ("lrm_ccn_warmup", "lrm_ccn_intervals", "joint", "layout")
NUM_CLASSES = len(CLASS_NAMES)


@dataclass(frozen=True)
class Ablation:
    no_spatial_cond: bool = False
    no_temporal_cond: bool = False
    no_depth_input: bool = False
    no_depth_loss: bool = False
    fix_lrm: bool = False
    use_gt_depth_cloud: bool = False

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class SceneVideoModel(nn.Module):
    def __init__(self, cfg: Config = Config()):
        super().__init__()
        self.cfg = cfg
        self.ae = FrameAutoencoder(cfg.ae_widths)
        self.ccn = CausalCompressor(hidden=cfg.ccn_hidden)
        self.lrm = ReconstructionModel(cfg.lrm_config())
        self.backbone = VideoDenoiser(cfg.denoiser_config())
        self.schedule = NoiseSchedule.cosine(cfg.diffusion_steps)
        self.init_controlnets()

    def init_controlnets(self) -> None:
        """(Re)build every control branch as a copy of the current backbone."""
        self.controlnet_scvg = ControlNet(self.backbone)
        self.controlnet_depth = ControlNet(self.backbone, cond_encoder=LayoutEncoder(1))
        self.controlnet_semantic = ControlNet(self.backbone,
                                              cond_encoder=LayoutEncoder(NUM_CLASSES))
        self.to(next(self.backbone.parameters()).dtype)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    @property
    def camera(self) -> CameraModel:
        return CameraModel.from_fov(self.cfg.image_size, self.cfg.image_size, self.cfg.fov_deg)

    # ------------------------------------------------------------- checkpointing
    def to_checkpoint(self, stage: str, meta: Optional[dict] = None) -> Checkpoint:
        return Checkpoint({g: module_to_group(getattr(self, g)) for g in GROUPS}, stage,
                          self.cfg.to_dict(), dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "SceneVideoModel":
        model = cls(validate(ck.config))
        for g in GROUPS:
            load_group_into(getattr(model, g), ck.groups[g])
        return model

    # ------------------------------------------------------------- conditioning
    def tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def reconstruct(self, images, monos, poses, ablation: Ablation = Ablation()):
        """Two posed views -> (raw distance, features) at full resolution, each (2, H, W, *)."""
        cam = self.camera
        monos = np.asarray(monos)
        if ablation.no_depth_input:
            monos = np.ones_like(monos)
        x = assemble_lrm_input(list(images), list(monos), [cam, cam], list(poses))
        raw, feat = self.lrm(self.tensor(x)[None])
        return raw[0], feat[0]

    def spatial_condition(self, images, monos, spatial_poses, window_poses,
                          ablation: Ablation = Ablation(), gt_depths=None):
        """LRM -> feature cloud -> splat into window views -> causal compression."""
        cam = self.camera
        cfg = self.cfg
        raw, feat = self.reconstruct(images, monos, spatial_poses, ablation)
        cloud = lrm_to_cloud(raw, feat, [cam, cam], spatial_poses, cfg.patch, cfg.near, cfg.far)
        if ablation.use_gt_depth_cloud and gt_depths is not None:
            pts = [unproject_depth(pool_to_grid(torch.as_tensor(np.asarray(d))[None], cfg.patch)
                                   [0].numpy(), cam, p).reshape(-1, 3)
                   for d, p in zip(gt_depths, spatial_poses)]
            cloud = FeaturePointCloud(self.tensor(np.concatenate(pts)), cloud.features,
                                      cloud.source_view_ids)
        lat_cam = cam.scaled(1.0 / cfg.patch)
        rendered = splat_render(cloud, [(lat_cam, p) for p in window_poses])
        z_spat = causal_compress(self.ccn, rendered.features)
        if ablation.no_spatial_cond:
            z_spat = LatentClip(torch.zeros_like(z_spat.data), z_spat.frame_map)
        return rendered, z_spat, raw

    def spatiotemporal_condition(self, z_spat: LatentClip, temporal_latent=None,
                                 last_latent=None, ablation: Ablation = Ablation(),
                                 visibility=None) -> SpatiotemporalCondition:
        cond = SpatiotemporalCondition(z_spat, [], visibility)
        if temporal_latent is not None and not ablation.no_temporal_cond:
            cond = temporal_replace(cond.z_st, temporal_latent, 0, visibility)
        if last_latent is not None:
            n = z_spat.data.shape[0]
            replaced = cond.replaced_index
            cond = temporal_replace(cond.z_st, last_latent, n - 1, visibility)
            cond.replaced_index = replaced + [n - 1]
        return cond

    def scvg_residuals(self, cond: SpatiotemporalCondition, z_t, t):
        return self.controlnet_scvg(cond.z_st.data[None].expand(z_t.shape[0], -1, -1, -1, -1),
                                    z_t, t)


def layout_maps(depths, semantic, near: float = 0.1):
    """Layout control inputs: (N, H, W, 1) inverse depth and (N, H, W, C) one-hot classes."""
    d = torch.as_tensor(np.asarray(depths, dtype=np.float64))
    inv = (near / d.clamp(min=near)) ** 0.5
    sem = torch.as_tensor(np.asarray(semantic, dtype=np.int64))[..., 0]
    return inv, F.one_hot(sem, NUM_CLASSES).to(torch.float64)


# ----------------------------------------------------------------- staged training

def stage_modules(model: SceneVideoModel, stage: str, ablation: Ablation = Ablation()):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    if stage in ("lrm_ccn_warmup", "lrm_ccn_intervals"):
        mods = {"lrm": model.lrm, "ccn": model.ccn}
    elif stage == "joint":
        mods = {"ccn": model.ccn, "controlnet_scvg": model.controlnet_scvg}
        if not ablation.fix_lrm:
            mods["lrm"] = model.lrm
    else:
        mods = {"controlnet_depth": model.controlnet_depth,
                "controlnet_semantic": model.controlnet_semantic}
    if ablation.no_spatial_cond:
        mods.pop("lrm", None)
    return mods


def set_trainable(model: SceneVideoModel, stage: str, ablation: Ablation = Ablation()):
    model.requires_grad_(False)
    params = []
    for mod in stage_modules(model, stage, ablation).values():
        mod.requires_grad_(True)
        params.extend(mod.parameters())
    return params


def make_optimizer(model, stage, cfg: Config, ablation: Ablation = Ablation(),
                   lr: Optional[float] = None):
    params = set_trainable(model, stage, ablation)
    opt = torch.optim.AdamW(params, lr=lr or cfg.lr, weight_decay=cfg.weight_decay)
    warm = max(cfg.warmup_steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warm))
    return opt, sched


class LatentCache:
    """Frozen-AE encodings of whole records, computed once."""

    def __init__(self, model: SceneVideoModel):
        self.model = model
        self._cache: dict[int, torch.Tensor] = {}

    @torch.no_grad()
    def __call__(self, rec: ClipRecord) -> torch.Tensor:
        key = id(rec)
        if key not in self._cache:
            imgs = self.model.tensor(rec.images)
            self._cache[key] = torch.cat([self.model.ae.encode(imgs[i:i + 32])
                                          for i in range(0, len(imgs), 32)])
        return self._cache[key]


def _noised(model: SceneVideoModel, z0: torch.Tensor, gen: torch.Generator):
    """Several independent noise levels for one clean clip; the condition is shared."""
    k = model.cfg.noise_draws
    t = torch.randint(0, model.schedule.T, (k,), generator=gen)
    eps = torch.randn((k, *z0.shape[1:]), generator=gen, dtype=torch.float64).to(z0.dtype)
    return t, eps, q_sample(model.schedule, z0, t, eps)


def window_losses(model: SceneVideoModel, sample: WindowSample, stage: str,
                  latents: LatentCache, gen: torch.Generator,
                  ablation: Ablation = Ablation()) -> dict:
    cfg = model.cfg
    rec = sample.record
    n_frames = len(sample.frame_ids)
    compressed_length(n_frames)
    gt = latents(rec)
    parts = {}
    if stage == "layout":
        inv, onehot = layout_maps(rec.depths[sample.frame_ids], rec.semantic[sample.frame_ids],
                                  cfg.near)
        z0 = gt[sample.frame_ids][None]
        total = 0.0
        for net, cond in ((model.controlnet_depth, inv), (model.controlnet_semantic, onehot)):
            t, eps, z_t = _noised(model, z0, gen)
            res = net(cond.to(z0.dtype)[None].expand(len(t), *cond.shape), z_t, t)
            total = total + diffusion_loss(model.backbone(z_t, t, net.pad(res)), eps)
        parts["diffusion"] = total
        parts["total"] = total_loss(parts, _weights(cfg))
        return parts

    sp = sample.spatial_ids
    rendered, z_spat, raw = model.spatial_condition(
        rec.images[sp], rec.mono[sp], [rec.poses[i] for i in sp], sample.poses, ablation,
        gt_depths=rec.depths[sp])
    last = group_last_frames(n_frames)
    if not ablation.no_spatial_cond:
        views = evenly_spaced(n_frames, cfg.depth_views)
        mono = pool_to_grid(model.tensor(rec.mono[[sample.frame_ids[v] for v in views]]),
                            cfg.patch)
        if not ablation.no_depth_loss:
            parts["depth"] = depth_loss(rendered.depths[views], mono, rendered.visibility[views])
        target = gt[[sample.frame_ids[j] for j in last]]
        parts["latent"] = latent_loss(z_spat.data, target, rendered.visibility[last])
    if stage == "joint":
        z0 = gt[sample.frame_ids][None]
        cond = model.spatiotemporal_condition(
            z_spat, gt[sample.frame_ids[0]],
            gt[sample.frame_ids[-1]] if sample.pin_last else None, ablation,
            rendered.visibility)
        t, eps, z_t = _noised(model, z0, gen)
        res = model.scvg_residuals(cond, z_t, t)
        eps_hat = model.backbone(z_t, t, model.controlnet_scvg.pad(res))
        parts["diffusion"] = diffusion_loss(eps_hat, eps)
    parts["total"] = total_loss(parts, _weights(cfg))
    return parts


def _weights(cfg: Config) -> LossWeights:
    return LossWeights(cfg.lambda_depth, cfg.lambda_latent, cfg.lambda_diffusion)


def train_step(model: SceneVideoModel, samples: Sequence[WindowSample], optimizer, stage: str,
               latents: LatentCache, gen: torch.Generator, ablation: Ablation = Ablation(),
               scheduler=None) -> dict:
    for s in samples:
        if (len(s.frame_ids) - 1) % 4:
            raise ValueError(f"window of {len(s.frame_ids)} frames violates N = 1 (mod 4)")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    breakdown: dict[str, float] = {}
    for s in samples:
        parts = window_losses(model, s, stage, latents, gen, ablation)
        (parts["total"] / len(samples)).backward()
        for k, v in parts.items():
            breakdown[k] = breakdown.get(k, 0.0) + float(torch.as_tensor(v).detach()) / len(samples)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return breakdown


def train_stage(model: SceneVideoModel, records: Sequence[ClipRecord], stage: str, steps: int,
                seed: int = 0, ablation: Ablation = Ablation(),
                log_fn: Optional[Callable[[dict], None]] = None,
                sampler: Optional[Callable[[np.random.Generator], WindowSample]] = None,
                lr: Optional[float] = None) -> list:
    cfg = model.cfg
    opt, sched = make_optimizer(model, stage, cfg, ablation, lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    cache = LatentCache(model)
    intervals = (1,) if stage == "lrm_ccn_warmup" else (1, 2, 3)
    history = []
    t0 = time.time()
    for step in range(steps):
        samples = []
        for _ in range(cfg.batch):
            if sampler is not None:
                samples.append(sampler(rng))
            else:
                rec = records[int(rng.integers(len(records)))]
                samples.append(sample_window(rec, cfg.window, rng, intervals,
                                             cfg.duplicate_prob,
                                             cfg.pin_last_prob if stage == "joint" else 0.0))
        out = train_step(model, samples, opt, stage, cache, gen, ablation, sched)
        out["step"] = step
        out["elapsed"] = time.time() - t0
        history.append(out)
        if log_fn is not None:
            log_fn(dict(out, stage=stage))
    model.requires_grad_(True)
    return history


# ----------------------------------------------------------------- pretraining

def pretrain_autoencoder(ae: FrameAutoencoder, frames: np.ndarray, steps: int, batch: int = 16,
                         lr: float = 1e-3, seed: int = 0, log_fn=None) -> list:
    """MSE reconstruction pretraining, then latent standardization."""
    data = torch.as_tensor(frames, dtype=next(ae.parameters()).dtype)
    opt = torch.optim.AdamW(ae.parameters(), lr=lr, weight_decay=0.0)
    total = max(steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 50) * 0.5 * (1 + np.cos(np.pi * min(s / total, 1.0))))
    gen = torch.Generator().manual_seed(seed)
    ae.requires_grad_(True)
    ae.latent_mean.zero_()
    ae.latent_std.fill_(1.0)
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(data), (batch,), generator=gen)
        x = data[idx]
        if torch.rand((), generator=gen) < 0.5:
            x = x.flip(2)
        loss = F.mse_loss(ae.decode(ae.encode(x)), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append({"step": step, "mse": loss.item()})
        if log_fn is not None and step % 50 == 0:
            log_fn(history[-1])
    ae.calibrate(data)
    ae.requires_grad_(False)
    return history


def pretrain_backbone(model: SceneVideoModel, records: Sequence[ClipRecord], steps: int,
                      seed: int = 0, lr: Optional[float] = None, log_fn=None) -> list:
    """Unconditional epsilon-prediction pretraining on per-frame latent clips."""
    cfg = model.cfg
    den = model.backbone
    model.requires_grad_(False)
    den.requires_grad_(True)
    opt = torch.optim.AdamW(den.parameters(), lr=lr or cfg.lr, weight_decay=0.0)
    warm = max(cfg.warmup_steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warm))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    cache = LatentCache(model)
    history = []
    for step in range(steps):
        zs = []
        for _ in range(cfg.batch):
            rec = records[int(rng.integers(len(records)))]
            s = sample_window(rec, cfg.window, rng, (1, 2, 3))
            zs.append(cache(rec)[s.frame_ids])
        z0 = torch.stack(zs)
        t = torch.randint(0, model.schedule.T, (z0.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(z0.dtype)
        loss = diffusion_loss(den(q_sample(model.schedule, z0, t, eps), t), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append({"step": step, "diffusion": float(loss.detach())})
        if log_fn is not None and step % 50 == 0:
            log_fn(history[-1])
    model.requires_grad_(True)
    model.init_controlnets()
    return history


# ----------------------------------------------------------------- sampling

@torch.no_grad()
def sample_latents(model: SceneVideoModel, controls, n_frames: int, steps: Optional[int] = None,
                   seed: int = 0) -> torch.Tensor:
    """DDIM sampling with weighted control branches.

    ``controls``: list of (ControlNet, condition tensor with leading batch axis, weight).
    """
    cfg = model.cfg
    model.eval()
    lat = cfg.image_size // 8
    shape = (1, n_frames, lat, lat, model.backbone.cfg.channels)
    combo = ControlCombination(tuple(w for _, _, w in controls))

    def eps_fn(z_t, t):
        per_net = [net.pad(net(cond, z_t, t)) for net, cond, _ in controls]
        res = combine_controls(combo, per_net) if per_net else None
        return model.backbone(z_t, t, res)

    return ddim_sample(eps_fn, shape, model.schedule, steps or cfg.sample_steps, seed,
                       dtype=model.dtype, clip=cfg.sample_clip,
                       min_alpha_bar=cfg.sample_min_alpha_bar)[0]


@torch.no_grad()
def decode_frames(model: SceneVideoModel, latents: torch.Tensor) -> np.ndarray:
    out = model.ae.decode(latents).clamp(0, 1)
    return out.cpu().numpy().astype(np.float64)


def sample_clip(model: SceneVideoModel, condition: SpatiotemporalCondition, n_frames: int,
                steps: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Generate an N-frame clip under one spatiotemporal condition."""
    if model is None:
        raise ValueError("sampling needs a trained checkpoint")
    z = sample_latents(model, [(model.controlnet_scvg, condition.z_st.data[None], 1.0)],
                       n_frames, steps, seed)
    return decode_frames(model, z)
