"""Sliding-window autoregression over long pose trajectories.

Each window of N frames overlaps the previous one in exactly one frame. The
scene bank keeps two frames per generated window (with their depths); the two
bank entries that best cover the upcoming window become its spatial
conditions, and the shared overlap frame is its temporal condition.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import LAYOUT_STAGE1, LAYOUT_STAGE2
from .geometry import CameraModel, Pose, frustum_overlap_score
from .latent_video import collapse_duplicates, compressed_length, duplicate_for_condition
from .scene_synth import PosedFrame, mono_depth_stub
from .training import Ablation, SceneVideoModel, decode_frames, layout_maps, sample_latents

log = logging.getLogger(__name__)


@dataclass
class WindowPlan:
    windows: list                     # inclusive (start, end) frame ranges
    temporal_source: list             # per window: shared frame index, None for the first

    def __len__(self):
        return len(self.windows)


def _valid_lengths_near(length: int, n: int) -> tuple[int, int]:
    step = n - 1
    below = max(n, 1 + ((length - 1) // step) * step)
    return below, below + step if below < length else below


def plan_windows(trajectory_length: int, n: int) -> WindowPlan:
    if n < 1 or (n - 1) % 4:
        raise ValueError(f"window length {n} must satisfy N = 1 (mod 4)")
    if trajectory_length < n:
        raise ValueError(f"trajectory of {trajectory_length} frames is shorter than one window "
                         f"of {n}")
    if n == 1:
        return WindowPlan([(i, i) for i in range(trajectory_length)],
                          [None] + list(range(trajectory_length - 1)))
    if (trajectory_length - 1) % (n - 1):
        lo, hi = _valid_lengths_near(trajectory_length, n)
        raise ValueError(f"trajectory length {trajectory_length} does not tile windows of {n} "
                         f"with one shared frame; nearest valid lengths are {lo} and {hi}")
    k = (trajectory_length - 1) // (n - 1)
    windows = [(i * (n - 1), i * (n - 1) + n - 1) for i in range(k)]
    return WindowPlan(windows, [None] + [s for s, _ in windows[1:]])


@dataclass
class BankEntry:
    image: np.ndarray          # (H, W, 3)
    pose: Pose
    depth: np.ndarray          # (H, W, 1) depth used for overlap scoring
    mono: np.ndarray           # (H, W, 1) depth prior fed to the reconstruction model
    frame_index: int
    window: int


@dataclass
class SceneBank:
    entries: list = field(default_factory=list)

    def add(self, entry: BankEntry) -> None:
        if entry.depth is None:
            raise ValueError("bank entries need a depth map")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)


def bank_sample_indices(n: int) -> tuple[int, int]:
    return (n - 1) // 3, 2 * (n - 1) // 3


def score_bank(bank: SceneBank, window_poses: Sequence[Pose], camera: CameraModel) -> list:
    return [frustum_overlap_score(e.depth, e.pose, window_poses, camera) for e in bank.entries]


def select_spatial_conditions(bank: SceneBank, window_poses: Sequence[Pose],
                              camera: CameraModel):
    """Top-2 bank entries by mean overlap with the window; ties favour recent entries.

    Returns (first, second, info) where info holds the chosen indices and all scores.
    """
    if len(bank) == 0:
        raise ValueError("spatial-condition selection needs a nonempty scene bank")
    scores = score_bank(bank, window_poses, camera)
    order = sorted(range(len(bank)), key=lambda i: (-scores[i], -i))
    chosen = order[:2] if len(order) > 1 else [order[0], order[0]]
    info = {"selected": chosen, "scores": [float(s) for s in scores]}
    return bank.entries[chosen[0]], bank.entries[chosen[1]], info


def upsample_depth(depth_lat: torch.Tensor, visibility: torch.Tensor, size: int,
                   fill: float) -> np.ndarray:
    """(N, h, w, 1) latent-grid depth -> (N, H, W, 1), invisible cells filled first."""
    d = torch.where(visibility[..., None], depth_lat, torch.full_like(depth_lat, fill))
    up = F.interpolate(d.permute(0, 3, 1, 2).double(), size=(size, size), mode="bilinear",
                       align_corners=False)
    return up.permute(0, 2, 3, 1).numpy()


@dataclass
class WindowResult:
    frames: np.ndarray         # (N, H, W, 3)
    depths: np.ndarray         # (N, H, W, 1) splatted depth upsampled to image size
    visibility: np.ndarray     # (N, h, w)
    replaced_index: list


def window_seed(seed: int, window: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, window, salt]).generate_state(1)[0] % (2 ** 31))


@torch.no_grad()
def generate_window(model: SceneVideoModel, spatial: Sequence[BankEntry], window_poses,
                    temporal_image: Optional[np.ndarray] = None, k: int = 0,
                    last_image: Optional[np.ndarray] = None, seed: int = 0,
                    ablation: Ablation = Ablation(), steps: Optional[int] = None,
                    extra_controls=None, weights=None) -> WindowResult:
    """One spatiotemporally conditioned clip for ``window_poses``.

    ``extra_controls``: optional list of (ControlNet, condition) pairs combined
    with the SCVG branch using ``weights`` (SCVG weight last).
    """
    if model is None:
        raise ValueError("generate_window needs a trained checkpoint")
    poses = list(window_poses)
    latent_index = 0
    if temporal_image is not None and k > 0:
        poses, latent_index = duplicate_for_condition(poses, k)
    n_frames = len(poses)
    compressed_length(n_frames)
    model.eval()
    images = [e.image for e in spatial]
    monos = [e.mono for e in spatial]
    rendered, z_spat, _ = model.spatial_condition(images, monos, [e.pose for e in spatial],
                                                  poses, ablation)
    z_temp = model.ae.encode(model.tensor(temporal_image)[None])[0] \
        if temporal_image is not None else None
    z_last = model.ae.encode(model.tensor(last_image)[None])[0] if last_image is not None \
        else None
    if latent_index:
        cond = model.spatiotemporal_condition(z_spat, None, None, ablation, rendered.visibility)
        if z_temp is not None and not ablation.no_temporal_cond:
            data = cond.z_st.data.clone()
            data[latent_index] = z_temp
            cond.z_st.data = data
            cond.replaced_index = [latent_index]
    else:
        cond = model.spatiotemporal_condition(z_spat, z_temp, z_last, ablation,
                                              rendered.visibility)
    controls = [(model.controlnet_scvg, cond.z_st.data[None], 1.0)]
    if extra_controls:
        w = list(weights)
        controls = [(net, c, wt) for (net, c), wt in zip(extra_controls, w[:-1])] + \
                   [(model.controlnet_scvg, cond.z_st.data[None], w[-1])]
    z = sample_latents(model, controls, n_frames, steps, seed)
    frames = decode_frames(model, z)
    depths = upsample_depth(rendered.depths, rendered.visibility, model.cfg.image_size,
                            model.cfg.far)
    vis = rendered.visibility.numpy()
    if latent_index:
        frames = collapse_duplicates(list(frames), k)
        depths = collapse_duplicates(list(depths), k)
        vis = collapse_duplicates(list(vis), k)
        frames, depths, vis = np.stack(frames), np.stack(depths), np.stack(vis)
    return WindowResult(frames, depths, vis, cond.replaced_index)


def entry_from_frame(frame: PosedFrame, index: int, window: int, seed: int,
                     mono: Optional[np.ndarray] = None) -> BankEntry:
    """Bank entry whose depth prior is the stub prediction on ``frame.depth``."""
    if mono is None:
        mono = mono_depth_stub(frame, seed)
    return BankEntry(frame.image, frame.pose, frame.depth, mono, index, window)


def aligned_input_entry(first: PosedFrame, seed: int, reference_mean_depth: float) -> BankEntry:
    """Input image entry with its stub depth rescaled to a reference mean depth."""
    mono = mono_depth_stub(first, seed)
    mono = mono * (reference_mean_depth / mono.mean())
    return BankEntry(first.image, first.pose, mono, mono, 0, -1)


def update_bank(bank: SceneBank, result: WindowResult, window_poses, start: int, window: int,
                camera: CameraModel, seed: int = 0) -> SceneBank:
    n = len(window_poses)
    for j in bank_sample_indices(n):
        frame = PosedFrame(result.frames[j], window_poses[j], camera, result.depths[j])
        bank.add(entry_from_frame(frame, start + j, window, window_seed(seed, window, 100 + j)))
    return bank


@dataclass
class RunResult:
    frames: np.ndarray
    windows: list                   # per-window metadata
    bank: SceneBank


def run_perpetual(model: SceneVideoModel, first: PosedFrame, trajectory_poses, seed: int = 0,
                  ablation: Ablation = Ablation(), reference_mean_depth: Optional[float] = None,
                  steps: Optional[int] = None) -> RunResult:
    """Autoregressive generation from one posed image along a long trajectory."""
    n = model.cfg.window
    poses = list(trajectory_poses)
    plan = plan_windows(len(poses), n)
    cam = model.camera
    ref = reference_mean_depth if reference_mean_depth is not None else float(first.depth.mean())
    bank = SceneBank()
    bank.add(aligned_input_entry(first, window_seed(seed, 0, 1), ref))
    out = np.zeros((len(poses),) + first.image.shape)
    out[0] = first.image
    meta = []
    for w, (start, end) in enumerate(plan.windows):
        wposes = poses[start:end + 1]
        if w == 0:
            pair = [bank.entries[0], bank.entries[0]]
            info = {"selected": [0, 0], "scores": None}
            temporal = first.image
        else:
            a, b, info = select_spatial_conditions(bank, wposes, cam)
            pair = [a, b]
            temporal = out[start]
        info["includes_temporal_frame"] = any(e.frame_index == start for e in pair)
        res = generate_window(model, pair, wposes, temporal, 0, seed=window_seed(seed, w),
                              ablation=ablation, steps=steps)
        out[start + 1:end + 1] = res.frames[1:]
        update_bank(bank, res, wposes, start, w, cam, seed)
        meta.append(dict(info, window=w, start=start, end=end,
                         temporal_source=plan.temporal_source[w],
                         selected_frames=[e.frame_index for e in pair]))
        log.info("window %d [%d..%d] spatial=%s", w, start, end, meta[-1]["selected_frames"])
    return RunResult(out, meta, bank)


def run_sparse_interpolation(model: SceneVideoModel, first: PosedFrame, last: PosedFrame,
                             poses, two_pass: Optional[int] = None, seed: int = 0,
                             ablation: Ablation = Ablation(),
                             steps: Optional[int] = None) -> RunResult:
    """Frames between two posed images; ``poses`` spans first..last inclusive.

    Single pass needs len(poses) = 1 (mod 4). With ``two_pass=m`` a coarse clip
    of L = window frames is generated first, m + 1 of its frames are picked
    uniformly, and each adjacent pair is refined into L frames.
    """
    poses = list(poses)
    cam = model.camera
    seeds = iter(window_seed(seed, i, 7) for i in range(10 ** 6))

    def entry(frame: PosedFrame, idx):
        return entry_from_frame(frame, idx, -1, next(seeds))

    def one_pass(e0: BankEntry, e1: BankEntry, pp, w):
        if (len(pp) - 1) % 4:
            raise ValueError(f"interpolation pass of {len(pp)} poses violates N = 1 (mod 4)")
        return generate_window(model, [e0, e1], pp, e0.image, 0, last_image=e1.image,
                               seed=window_seed(seed, w), ablation=ablation, steps=steps)

    e_first, e_last = entry(first, 0), entry(last, len(poses) - 1)
    if two_pass is None:
        res = one_pass(e_first, e_last, poses, 0)
        meta = [{"pass": 1, "frames": [0, len(poses) - 1]}]
        return RunResult(res.frames, meta, SceneBank([e_first, e_last]))

    m = two_pass
    L = model.cfg.window
    if m < 1 or (L - 1) % m:
        raise ValueError(f"two-pass interpolation needs m >= 1 dividing {L - 1}, got {m}")
    if len(poses) != m * (L - 1) + 1:
        raise ValueError(f"two-pass with m={m}, L={L} needs {m * (L - 1) + 1} poses, "
                         f"got {len(poses)}")
    coarse_ids = [i * m for i in range(L)]
    coarse = one_pass(e_first, e_last, [poses[i] for i in coarse_ids], 0)
    picks = [j * (L - 1) // m for j in range(m + 1)]
    anchors = []
    for j, c in enumerate(picks):
        if j == 0:
            anchors.append(e_first)
        elif j == m:
            anchors.append(e_last)
        else:
            f = PosedFrame(coarse.frames[c], poses[coarse_ids[c]], cam, coarse.depths[c])
            anchors.append(entry(f, coarse_ids[c]))
    out = [first.image]
    meta = [{"pass": 1, "frames": coarse_ids}]
    for j in range(m):
        seg = poses[j * (L - 1): (j + 1) * (L - 1) + 1]
        res = one_pass(anchors[j], anchors[j + 1], seg, j + 1)
        out.extend(res.frames[1:])
        meta.append({"pass": 2, "segment": j, "frames": [j * (L - 1), (j + 1) * (L - 1)]})
    return RunResult(np.stack(out), meta, SceneBank(anchors))


def run_layout(model: SceneVideoModel, layout, trajectory_poses, seed: int = 0,
               steps: Optional[int] = None) -> RunResult:
    """Layout-conditioned generation from per-pose (depth, semantic) maps.

    The first window combines the semantic and depth branches; later windows
    add the spatiotemporal branch conditioned on the bank and overlap frame.
    Bank depths come from the layout itself.
    """
    n = model.cfg.window
    poses = list(trajectory_poses)
    plan = plan_windows(len(poses), n)
    cam = model.camera
    depths = np.stack([d for d, _ in layout])
    sems = np.stack([s for _, s in layout])
    bank = SceneBank()
    out = np.zeros((len(poses), cam.height, cam.width, 3))
    meta = []
    for w, (start, end) in enumerate(plan.windows):
        wposes = poses[start:end + 1]
        inv, onehot = layout_maps(depths[start:end + 1], sems[start:end + 1], model.cfg.near)
        inv, onehot = inv.to(model.dtype)[None], onehot.to(model.dtype)[None]
        extra = [(model.controlnet_semantic, onehot), (model.controlnet_depth, inv)]
        if w == 0:
            controls = [(net, c, wt) for (net, c), wt in zip(extra, LAYOUT_STAGE1.weights)]
            z = sample_latents(model, controls, len(wposes), steps, window_seed(seed, w))
            frames = decode_frames(model, z)
            info = {"weights": list(LAYOUT_STAGE1.weights)}
        else:
            a, b, info = select_spatial_conditions(bank, wposes, cam)
            res = generate_window(model, [a, b], wposes, out[start], 0,
                                  seed=window_seed(seed, w), steps=steps, extra_controls=extra,
                                  weights=LAYOUT_STAGE2.weights)
            frames = res.frames
            info["weights"] = list(LAYOUT_STAGE2.weights)
        if w == 0:
            out[start] = frames[0]
        out[start + 1:end + 1] = frames[1:]
        for j in bank_sample_indices(n):
            f = PosedFrame(frames[j], wposes[j], cam, depths[start + j])
            bank.add(entry_from_frame(f, start + j, w, window_seed(seed, w, 100 + j)))
        meta.append(dict(info, window=w, start=start, end=end))
    return RunResult(out, meta, bank)
