"""Rendered trajectory records and training-window sampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .geometry import CameraModel
from .scene_synth import (PosedFrame, SceneDescription, SceneParams, Trajectory, generate_scene,
                          generate_trajectory, mono_depth_stub, render_view)


@dataclass
class ClipRecord:
    images: np.ndarray     # (T, H, W, 3) float32, 8-bit quantized
    depths: np.ndarray     # (T, H, W, 1) float32
    mono: np.ndarray       # (T, H, W, 1) float32, scale-free stub depth
    semantic: np.ndarray   # (T, H, W, 1) uint8
    poses: list
    camera: CameraModel
    scene_seed: int = 0
    kind: str = "custom"

    def __len__(self):
        return len(self.poses)

    def frame(self, i: int) -> PosedFrame:
        return PosedFrame(self.images[i].astype(np.float64), self.poses[i], self.camera,
                          self.depths[i].astype(np.float64), self.semantic[i])


def stub_seed(scene_seed: int, frame_index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([scene_seed, frame_index, salt, 7]).generate_state(1)[0])


def render_record(scene: SceneDescription, traj: Trajectory, salt: int = 0) -> ClipRecord:
    frames = [render_view(scene, p, traj.camera) for p in traj.poses]
    return ClipRecord(
        images=np.stack([io.quantize(f.image) for f in frames]).astype(np.float32),
        depths=np.stack([f.depth for f in frames]).astype(np.float32),
        mono=np.stack([mono_depth_stub(f, stub_seed(scene.seed, i, salt))
                       for i, f in enumerate(frames)]).astype(np.float32),
        semantic=np.stack([f.semantic for f in frames]).astype(np.uint8),
        poses=list(traj.poses), camera=traj.camera, scene_seed=scene.seed, kind=traj.kind)


def build_scene_records(scene_seed: int, kinds=("lawnmower", "random-walk", "dolly", "orbit"),
                        length: int = 97, traj_seed: int = 0, camera: Optional[CameraModel] = None,
                        params: SceneParams = SceneParams()) -> tuple[SceneDescription, list]:
    scene = generate_scene(scene_seed, params)
    camera = camera or CameraModel.from_fov(64, 64)
    records = []
    for i, kind in enumerate(kinds):
        traj = generate_trajectory(kind, length, scene, seed=traj_seed * 100 + i, camera=camera)
        records.append(render_record(scene, traj, salt=traj_seed * 100 + i))
    return scene, records


def write_record(out_dir, rec: ClipRecord) -> None:
    out_dir = Path(out_dir)
    io.write_frames(out_dir / "frames", list(rec.images), rec.poses, rec.camera,
                    extra={"scene_seed": rec.scene_seed, "kind": rec.kind})
    io.save_array(out_dir / "depth", rec.depths)
    io.save_array(out_dir / "mono_depth", rec.mono)
    io.save_array(out_dir / "semantic", rec.semantic)


def read_record(in_dir) -> ClipRecord:
    in_dir = Path(in_dir)
    frames, poses, camera = io.read_frames(in_dir / "frames")
    meta = io.read_json(in_dir / "frames" / "poses.json")
    return ClipRecord(np.stack(frames).astype(np.float32), io.load_array(in_dir / "depth"),
                      io.load_array(in_dir / "mono_depth"), io.load_array(in_dir / "semantic"),
                      poses, camera, meta.get("scene_seed", 0), meta.get("kind", "custom"))


def write_dataset(out_dir, records, window: int) -> None:
    out_dir = Path(out_dir)
    names = []
    for i, rec in enumerate(records):
        name = f"clip_{i:04d}"
        write_record(out_dir / name, rec)
        names.append({"name": name, "frames": len(rec), "kind": rec.kind,
                      "scene_seed": rec.scene_seed})
    io.write_json_atomic(out_dir / "dataset.json", {"window": window, "clips": names})


def read_dataset(in_dir) -> tuple[list, int]:
    in_dir = Path(in_dir)
    meta = io.read_json(in_dir / "dataset.json")
    return [read_record(in_dir / c["name"]) for c in meta["clips"]], meta["window"]


@dataclass
class WindowSample:
    """Everything one training step needs for a single window."""

    frame_ids: list            # indices into the record for the N window frames
    spatial_ids: list          # two record indices used as spatial conditions
    record: ClipRecord
    pin_last: bool = False

    @property
    def poses(self):
        return [self.record.poses[i] for i in self.frame_ids]


def sample_window(rec: ClipRecord, n_frames: int, rng: np.random.Generator,
                  intervals=(1,), duplicate_prob: float = 0.25, pin_last_prob: float = 0.0,
                  start: Optional[int] = None, interval: Optional[int] = None) -> WindowSample:
    interval = interval or int(rng.choice(intervals))
    span = (n_frames - 1) * interval
    if span >= len(rec):
        interval, span = 1, n_frames - 1
    if start is None:
        start = int(rng.integers(0, len(rec) - span))
    ids = [start + i * interval for i in range(n_frames)]
    if rng.random() < duplicate_prob:
        spatial = [ids[0], ids[0]]
    else:
        lo = max(0, start - 2 * span)
        pool = np.arange(lo, ids[-1] + 1)
        spatial = sorted(int(x) for x in rng.choice(pool, size=2, replace=False))
    return WindowSample(ids, spatial, rec, pin_last=bool(rng.random() < pin_last_prob))
