"""Scaled-down training probes with an on-disk artifact cache.

The pipeline is: AE pretraining -> backbone pretraining -> reconstruction and
compressor warmup -> joint conditioning training. Artifacts are cached under
``cache_dir`` keyed by a hash of everything that produced them, so repeated
test runs reuse trained checkpoints.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import io
from .autoregression import entry_from_frame, generate_window, plan_windows, run_perpetual, run_layout
from .checkpoint import Checkpoint
from .config import Config
from .data import ClipRecord, WindowSample, build_scene_records
from .geometry import CameraModel
from .metrics import oracle_pose_estimator, align_trajectory, pose_metrics, psnr
from .training import (Ablation, SceneVideoModel, pretrain_autoencoder, pretrain_backbone,
                       train_stage)

log = logging.getLogger(__name__)

TRAIN_KINDS = ("lawnmower", "random-walk", "dolly", "orbit")
ABLATION_VARIANTS = {"full": Ablation(), "no_spatial_cond": Ablation(no_spatial_cond=True),
                     "no_temporal_cond": Ablation(no_temporal_cond=True)}


def default_cache_dir() -> Path:
    return Path(os.environ.get("WINDOWGEN_CACHE", Path.cwd() / ".cache"))


def training_fields(cfg: Config) -> dict:
    """Config entries that affect trained weights (sampling settings excluded)."""
    return {k: v for k, v in cfg.to_dict().items() if not k.startswith("sample_")}


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ArtifactStore:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, key: str, suffix: str) -> Path:
        return self.root / f"{name}-{key}{suffix}"

    def checkpoint(self, name: str, key: str, build) -> SceneVideoModel:
        p = self.path(name, key, ".ckpt")
        if p.exists():
            log.info("cache hit %s", p.name)
            return SceneVideoModel.from_checkpoint(Checkpoint.load(p))
        t0 = time.time()
        model, stage, meta = build()
        meta = dict(meta, build_seconds=time.time() - t0)
        model.to_checkpoint(stage, meta).save(p)
        log.info("built %s in %.0fs", p.name, meta["build_seconds"])
        return model

    def result(self, name: str, key: str, build) -> dict:
        p = self.path(name, key, ".json")
        if p.exists():
            return io.read_json(p)
        t0 = time.time()
        out = dict(build(), build_seconds=time.time() - t0)
        io.write_json_atomic(p, out)
        return out


def probe_records(cfg: Config) -> list:
    cam = CameraModel.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    return build_scene_records(cfg.scene_seed, TRAIN_KINDS, cfg.trajectory_length, camera=cam)[1]


def base_model(cfg: Config, store: ArtifactStore, records=None, seed: int = 0) -> SceneVideoModel:
    """Pretrained AE + backbone + warmed-up reconstruction model and compressor."""
    records = records if records is not None else probe_records(cfg)
    k_ae = _key("ae", cfg.ae_widths, cfg.ae_steps, cfg.ae_batch, cfg.ae_lr, cfg.image_size,
                cfg.scene_seed, cfg.trajectory_length, seed)

    def build_ae():
        torch.manual_seed(seed)
        model = SceneVideoModel(cfg)
        frames = np.concatenate([r.images for r in records])
        hist = pretrain_autoencoder(model.ae, frames, cfg.ae_steps, cfg.ae_batch, cfg.ae_lr, seed)
        return model, "ae", {"final_mse": hist[-1]["mse"] if hist else None}

    model = store.checkpoint("ae", k_ae, build_ae)
    k_bb = _key(k_ae, "backbone", training_fields(cfg), seed)

    def build_bb():
        hist = pretrain_backbone(model, records, cfg.backbone_steps, seed=seed)
        return model, "backbone", {"final_loss": float(np.mean([h["diffusion"]
                                                                  for h in hist[-100:]]))}

    model = store.checkpoint("backbone", k_bb, build_bb)
    k_warm = _key(k_bb, "lrm_ccn", seed)

    def build_warm():
        train_stage(model, records, "lrm_ccn_warmup", cfg.warmup_stage_steps, seed=seed)
        train_stage(model, records, "lrm_ccn_intervals", cfg.intervals_stage_steps, seed=seed + 1)
        return model, "lrm_ccn_intervals", {}

    return store.checkpoint("lrm_ccn", k_warm, build_warm)


def _base_key(cfg: Config, seed: int) -> str:
    return _key("base", training_fields(cfg), seed)


# ------------------------------------------------------------------ overfit probe

OVERFIT_CLIP = "dolly"


def overfit_window(records, n: int) -> WindowSample:
    rec = next(r for r in records if r.kind == OVERFIT_CLIP)
    return WindowSample(list(range(n)), [0, n - 1], rec)


def _entry(rec: ClipRecord, i: int):
    return entry_from_frame(rec.frame(i), i, -1, 0, mono=rec.mono[i].astype(np.float64))


def sampling_fields(cfg: Config) -> dict:
    return {k: v for k, v in cfg.to_dict().items() if k.startswith("sample_")}


def overfit_probe(cfg: Config, store: ArtifactStore, steps: int = 2000, lr: float = 1e-3,
                  seed: int = 0, sample_seed: int = 0) -> dict:
    """Joint training on one fixed window, then sampling that window again."""
    if steps > 2000:
        raise ValueError("the overfit probe is capped at 2000 joint steps")
    records = probe_records(cfg)
    key = _key(_base_key(cfg, seed), "overfit", steps, lr, OVERFIT_CLIP)
    window = overfit_window(records, cfg.window)
    rec = window.record

    def build():
        model = base_model(cfg, store, records, seed)
        hist = train_stage(model, [rec], "joint", steps, seed=seed,
                           sampler=lambda rng: window, lr=lr)
        return model, "joint", {"overfit_steps": steps, "lr": lr,
                                "final_loss": float(np.mean([h["diffusion"]
                                                             for h in hist[-100:]]))}

    model = store.checkpoint("overfit", key, build)

    def evaluate():
        ids = window.frame_ids
        gt = rec.images[ids].astype(np.float64)
        res = generate_window(model, [_entry(rec, i) for i in window.spatial_ids],
                              window.poses, rec.images[ids[0]].astype(np.float64),
                              seed=sample_seed)
        with torch.no_grad():
            roundtrip = model.ae.decode(model.ae.encode(model.tensor(gt))).clamp(0, 1).numpy()
        cond_res = scvg_residual_norm(model, window)
        return {"window_psnr": psnr(res.frames, gt),
                "frame_psnr": [psnr(a, b) for a, b in zip(res.frames, gt)],
                "temporal_frame_psnr": psnr(res.frames[0], gt[0]),
                "temporal_frame_psnr_vs_ae": psnr(res.frames[0], roundtrip[0]),
                "ae_psnr": psnr(roundtrip, gt),
                "ae_psnr_scene": ae_psnr(model, records),
                "residual_norm": cond_res, "joint_steps": steps, "lr": lr}

    return store.result("overfit_eval", _key(key, sample_seed, sampling_fields(cfg)), evaluate)


@torch.no_grad()
def ae_psnr(model: SceneVideoModel, records) -> float:
    vals = []
    for r in records:
        x = model.tensor(r.images)
        y = model.ae.decode(model.ae.encode(x)).clamp(0, 1)
        vals.append(psnr(y.numpy(), r.images.astype(np.float64)))
    return float(np.mean(vals))


@torch.no_grad()
def scvg_residual_norm(model: SceneVideoModel, window: WindowSample, t: int = 500) -> float:
    rec = window.record
    sp = window.spatial_ids
    rendered, z_spat, _ = model.spatial_condition(rec.images[sp], rec.mono[sp],
                                                  [rec.poses[i] for i in sp], window.poses)
    cond = model.spatiotemporal_condition(z_spat, None, None, Ablation(), rendered.visibility)
    lat = model.cfg.image_size // 8
    gen = torch.Generator().manual_seed(0)
    z_t = torch.randn((1, len(window.frame_ids), lat, lat, 16), generator=gen,
                      dtype=torch.float64).to(model.dtype)
    res = model.scvg_residuals(cond, z_t, torch.tensor([t]))
    return float(sum(r.norm() ** 2 for r in res) ** 0.5)


# ------------------------------------------------------------------ ablation probe

def joint_variant(cfg: Config, store: ArtifactStore, variant: str, seed: int = 0,
                  steps: Optional[int] = None) -> SceneVideoModel:
    ablation = ABLATION_VARIANTS[variant]
    steps = cfg.joint_steps if steps is None else steps
    key = _key(_base_key(cfg, seed), "joint", variant, steps)

    def build():
        records = probe_records(cfg)
        model = base_model(cfg, store, records, seed)
        train_stage(model, records, "joint", steps, seed=seed + 10, ablation=ablation)
        return model, "joint", {"ablation": ablation.to_dict(), "steps": steps}

    return store.checkpoint(f"joint_{variant}", key, build)


def revisit_pairs(length: int, window: int) -> list:
    """(first visit, revisit) frame pairs on a two-row lawnmower sweep.

    Row two retraces row one in reverse, so frame 48 - k and 49 + k of a
    97-frame sweep share x. Pairs closer than one window are skipped so the
    revisit lies outside the temporal context of the first visit.
    """
    row = -(-length // 2)
    pairs = []
    for k in range(length - row):
        a, b = row - 1 - k, row + k
        if a >= 0 and b - a > window:
            pairs.append((a, b))
    return pairs


def drift_proxy(gen: np.ndarray, ref: np.ndarray, pairs) -> float:
    """Mean squared mismatch between generated and true appearance change at revisits."""
    return float(np.mean([np.mean(((gen[b] - gen[a]) - (ref[b] - ref[a])) ** 2)
                          for a, b in pairs]))


def discontinuity(gen: np.ndarray, ref: np.ndarray, starts=None) -> float:
    """Mean squared mismatch of frame-to-frame change against the reference,
    over all consecutive pairs or only the pairs (s, s+1) for ``starts``."""
    err = (np.diff(gen, axis=0) - np.diff(ref, axis=0)) ** 2
    if starts is not None:
        err = err[list(starts)]
    return float(np.mean(err))


def seam_starts(length: int, window: int) -> list:
    """First frame of every window after the first; the pair (s, s+1) crosses a seam."""
    return [s for s, _ in plan_windows(length, window).windows[1:]]


def ablation_probe(cfg: Config, store: ArtifactStore, seed: int = 0, sample_seeds=(0, 1),
                   traj_seed: int = 5, length: int = 97, oracle=(2.0, 0.05)) -> dict:
    """Perpetual generation on a held-out lawnmower sweep for each variant."""
    cam = CameraModel.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    rec = build_scene_records(cfg.scene_seed, ("lawnmower",), length, traj_seed, camera=cam)[1][0]
    ref = rec.images.astype(np.float64)
    pairs = revisit_pairs(length, cfg.window)
    seams = seam_starts(length, cfg.window)
    out = {"pairs": pairs, "seams": seams, "variants": {}}
    for variant in ABLATION_VARIANTS:
        model = joint_variant(cfg, store, variant, seed)

        def evaluate():
            rows = []
            for s in sample_seeds:
                first = rec.frame(0)
                run = run_perpetual(model, first, rec.poses, s, ABLATION_VARIANTS[variant],
                                    reference_mean_depth=float(first.depth.mean()))
                est = oracle_pose_estimator(rec.poses, *oracle, seed=1234)
                al = align_trajectory(est, rec.poses)
                r, t = pose_metrics(al.poses, rec.poses)
                rows.append({"drift": drift_proxy(run.frames, ref, pairs),
                             "discontinuity": discontinuity(run.frames, ref, seams),
                             "discontinuity_all": discontinuity(run.frames, ref),
                             "psnr": psnr(run.frames[1:], ref[1:]), "r_dist": r, "t_dist": t})
            return {k: float(np.mean([row[k] for row in rows])) for k in rows[0]} | \
                {"per_seed": rows}

        key = _key(_base_key(cfg, seed), "ablation_eval", variant, list(sample_seeds), traj_seed,
                   length, oracle, cfg.joint_steps, sampling_fields(cfg), "seams")
        out["variants"][variant] = store.result(f"ablation_{variant}", key, evaluate)
    return out


def layout_model(cfg: Config, store: ArtifactStore, seed: int = 0) -> SceneVideoModel:
    key = _key(_base_key(cfg, seed), "layout", cfg.layout_steps, cfg.joint_steps)

    def build():
        model = joint_variant(cfg, store, "full", seed)
        train_stage(model, probe_records(cfg), "layout", cfg.layout_steps, seed=seed + 20)
        return model, "layout", {"steps": cfg.layout_steps}

    return store.checkpoint("layout", key, build)


def layout_probe(cfg: Config, store: ArtifactStore, seed: int = 0, length: int = 25) -> dict:
    model = layout_model(cfg, store, seed)
    rec = probe_records(cfg)[0]

    def evaluate():
        layout = [(rec.depths[i], rec.semantic[i]) for i in range(length)]
        run = run_layout(model, layout, rec.poses[:length], seed)
        return {"psnr": psnr(run.frames, rec.images[:length].astype(np.float64))}

    return store.result("layout_eval", _key(_base_key(cfg, seed), "layout_eval", length,
                                            cfg.layout_steps, sampling_fields(cfg)), evaluate)
