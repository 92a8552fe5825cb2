"""Procedural mini-city scenes and an analytic ray-cast renderer.

Scenes are axis-aligned boxes on a finite ground plane (world z-up). The
renderer returns RGB, exact z-depth and semantic ids, which makes every frame
its own ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (DEFAULT_FAR, CameraModel, Pose, camera_rays, frustum_overlap_score,
                       look_at, yaw_pose)

SKY, GROUND, BUILDING, ROOF, OBSTACLE = 0, 1, 2, 3, 4
CLASS_NAMES = {SKY: "sky", GROUND: "ground", BUILDING: "building", ROOF: "roof",
               OBSTACLE: "obstacle"}
PALETTE = np.array([
    [0.60, 0.75, 0.95],  # sky
    [0.42, 0.50, 0.36],  # ground
    [0.80, 0.52, 0.40],  # building
    [0.36, 0.34, 0.62],  # roof
    [0.92, 0.80, 0.22],  # obstacle
])
SKY_COLOR = PALETTE[SKY]
TRAJECTORY_KINDS = ("orbit", "dolly", "lawnmower", "random-walk")


@dataclass(frozen=True)
class SceneParams:
    count_range: tuple[int, int] = (8, 12)
    extent: tuple[float, float] = (7.0, 7.0)   # boxes live in [-ex, ex] x [-ey, ey]
    ground_half_size: float = 14.0
    building_prob: float = 0.65
    building_height: tuple[float, float] = (1.5, 4.5)
    obstacle_height: tuple[float, float] = (0.4, 1.0)
    footprint: tuple[float, float] = (1.0, 3.0)
    color_jitter: float = 0.06
    texture_amplitude: float = 0.12
    texture_period: float = 3.0


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    class_id: int
    color: np.ndarray
    phase: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Box) and self.class_id == other.class_id
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("lo", "hi", "color", "phase")))


@dataclass(frozen=True, eq=False)
class SceneDescription:
    seed: int
    params: SceneParams
    boxes: tuple[Box, ...]
    ground_color: np.ndarray
    extent: tuple[np.ndarray, np.ndarray]

    def __eq__(self, other):
        return (isinstance(other, SceneDescription) and self.seed == other.seed
                and self.params == other.params and self.boxes == other.boxes
                and np.array_equal(self.ground_color, other.ground_color))

    @property
    def primitive_count(self) -> int:
        return len(self.boxes) + 1  # + ground plane

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p)
        return any(np.all(p >= b.lo - margin) and np.all(p <= b.hi + margin) for b in self.boxes)


@dataclass
class PosedFrame:
    image: np.ndarray                     # (H, W, 3) in [0, 1]
    pose: Pose
    camera: CameraModel
    depth: Optional[np.ndarray] = None    # (H, W, 1)
    semantic: Optional[np.ndarray] = None  # (H, W, 1) int


@dataclass
class Trajectory:
    poses: list
    camera: CameraModel
    kind: str = "custom"

    def __len__(self):
        return len(self.poses)

    def centers(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> SceneDescription:
    lo_n, hi_n = params.count_range
    if lo_n > hi_n or hi_n < 0:
        raise ValueError(f"empty primitive count range {params.count_range}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(max(lo_n, 0), hi_n + 1))
    ex, ey = params.extent
    boxes = []
    for _ in range(n):
        is_building = rng.random() < params.building_prob
        sx, sy = rng.uniform(*params.footprint, size=2) * (1.0 if is_building else 0.5)
        cx = rng.uniform(-ex + sx / 2, ex - sx / 2)
        cy = rng.uniform(-ey + sy / 2, ey - sy / 2)
        hz = rng.uniform(*(params.building_height if is_building else params.obstacle_height))
        cls = BUILDING if is_building else OBSTACLE
        color = np.clip(PALETTE[cls] + rng.normal(0, params.color_jitter, 3), 0.05, 0.95)
        boxes.append(Box(np.array([cx - sx / 2, cy - sy / 2, 0.0]),
                         np.array([cx + sx / 2, cy + sy / 2, hz]),
                         cls, color, rng.uniform(0, 2 * np.pi, 2)))
    ground = np.clip(PALETTE[GROUND] + rng.normal(0, params.color_jitter / 2, 3), 0.05, 0.95)
    extent = (np.array([-params.ground_half_size, -params.ground_half_size, 0.0]),
              np.array([params.ground_half_size, params.ground_half_size,
                        max([b.hi[2] for b in boxes], default=0.0)]))
    return SceneDescription(seed, params, tuple(boxes), ground, extent)


def _texture(points: np.ndarray, phase: np.ndarray, params: SceneParams) -> np.ndarray:
    k = 2 * np.pi / params.texture_period
    s = np.sin(k * (points[:, 0] + points[:, 1]) + phase[0]) * np.cos(k * points[:, 2] + phase[1])
    return 1.0 + params.texture_amplitude * s


_FACE_SHADE = {0: 0.80, 1: 0.66, 2: 1.0}  # hit slab axis -> shade


def cast_rays(scene: SceneDescription, origins: np.ndarray, dirs: np.ndarray,
              far: float = DEFAULT_FAR):
    """Intersect rays (M, 3) whose directions have unit camera-z with the scene.

    Returns z-depth (M,), class ids (M,), colors (M, 3). Misses and hits
    beyond ``far`` are background.
    """
    m = origins.shape[0]
    best_t = np.full(m, np.inf)
    cls = np.full(m, SKY, dtype=np.int64)
    color = np.tile(SKY_COLOR, (m, 1))
    params = scene.params

    with np.errstate(divide="ignore", invalid="ignore"):
        # ground plane z = 0, finite square
        t = -origins[:, 2] / dirs[:, 2]
        p = origins + dirs * t[:, None]
        g = (dirs[:, 2] < 0) & (t > 0) & (np.abs(p[:, 0]) <= params.ground_half_size) & \
            (np.abs(p[:, 1]) <= params.ground_half_size)
        hit = g & (t < best_t)
        best_t[hit] = t[hit]
        cls[hit] = GROUND
        shade = 0.9 * _texture(p[hit], np.zeros(2), params)[:, None]
        color[hit] = scene.ground_color * shade

        inv = 1.0 / dirs
        for b in scene.boxes:
            t0 = (b.lo - origins) * inv
            t1 = (b.hi - origins) * inv
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            t_enter = tmin.max(axis=1)
            axis = tmin.argmax(axis=1)
            t_exit = tmax.min(axis=1)
            hit = (t_enter <= t_exit) & (t_enter > 0) & (t_enter < best_t)
            if not hit.any():
                continue
            best_t[hit] = t_enter[hit]
            ax = axis[hit]
            c = np.full(ax.shape, b.class_id)
            if b.class_id == BUILDING:
                c = np.where(ax == 2, ROOF, BUILDING)
            cls[hit] = c
            pts = origins[hit] + dirs[hit] * t_enter[hit, None]
            base = np.where((c == ROOF)[:, None], PALETTE[ROOF], b.color)
            shade = np.vectorize(_FACE_SHADE.get)(ax) * _texture(pts, b.phase, params)
            color[hit] = base * shade[:, None]

    bg = ~np.isfinite(best_t) | (best_t >= far)
    best_t[bg] = far
    cls[bg] = SKY
    color[bg] = SKY_COLOR
    return best_t, cls, np.clip(color, 0.0, 1.0)


def render_view(scene: SceneDescription, pose: Pose, camera: CameraModel,
                far: float = DEFAULT_FAR) -> PosedFrame:
    o, d = camera_rays(camera, pose, normalize=False)
    h, w = camera.height, camera.width
    t, cls, col = cast_rays(scene, o.reshape(-1, 3), d.reshape(-1, 3), far=far)
    return PosedFrame(image=col.reshape(h, w, 3), pose=pose, camera=camera,
                      depth=t.reshape(h, w, 1), semantic=cls.reshape(h, w, 1))


def _smooth_field(rng: np.random.Generator, h: int, w: int, grid: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse uniform[-1, 1] grid; values stay in [-1, 1]."""
    coarse = rng.uniform(-1, 1, size=(grid + 1, grid + 1))
    ys = np.linspace(0, grid, h)
    xs = np.linspace(0, grid, w)
    y0 = np.minimum(np.floor(ys).astype(int), grid - 1)
    x0 = np.minimum(np.floor(xs).astype(int), grid - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def mono_depth_stub(frame: PosedFrame, seed: int, scale_range=(0.5, 2.0), shift_range=(0.0, 0.5),
                    noise: float = 0.01) -> np.ndarray:
    """Scale/shift-ambiguous depth prediction: s * D + t + smooth noise."""
    if frame.depth is None:
        raise ValueError("mono_depth_stub needs a frame with ground-truth depth")
    if not 0 <= noise <= 0.02:
        raise ValueError("noise amplitude must lie in [0, 0.02]")
    rng = np.random.default_rng(seed)
    s = rng.uniform(*scale_range)
    t = rng.uniform(*shift_range)
    D = frame.depth[..., 0]
    eta = noise * D * _smooth_field(rng, *D.shape)
    return (s * D + t + eta)[..., None]


def _check_trajectory(scene: SceneDescription, poses, camera: CameraModel, step_bound: float,
                      min_overlap: float) -> bool:
    small = camera.resized_to(16, 16)
    for a, b in zip(poses[:-1], poses[1:]):
        if np.linalg.norm(a.translation - b.translation) > step_bound + 1e-9:
            return False
    for p in poses:
        if scene.contains(p.translation, margin=0.3):
            return False
    for a, b in zip(poses[:-1], poses[1:]):
        depth = render_view(scene, a, small).depth
        if frustum_overlap_score(depth, a, [b], small) < min_overlap:
            return False
    return True


def _orbit(length, rng, step_bound):
    radius = rng.uniform(10.0, 11.0)
    height = rng.uniform(1.5, 2.5)
    start = rng.uniform(0, 2 * np.pi)
    dtheta = min(0.9 * step_bound / radius, 2 * np.pi / max(length, 1)) * rng.choice([-1, 1])
    poses = []
    for i in range(length):
        a = start + i * dtheta
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, np.array([0.0, 0.0, 1.0])))
    return poses, {"center": [0.0, 0.0, height], "radius": radius}


def _dolly(length, rng, step_bound):
    x0 = rng.uniform(-4, 4)
    step = min(0.1, 0.9 * step_bound, 4.5 / max(length - 1, 1))
    return [yaw_pose([x0, -13.0 + i * step, 1.6], np.pi / 2, -0.15) for i in range(length)], {}


def _lawnmower(length, rng, step_bound, rows: int = 2, gap: float = 0.45):
    """Rows sweeping along x while facing north; later rows revisit earlier views."""
    row_len = math.ceil(length / rows)
    span = min(12.0, 0.9 * step_bound * max(row_len - 1, 1))
    y0 = rng.uniform(-10.5, -9.5)
    jitter = rng.uniform(-0.1, 0.1)
    poses = []
    for i in range(length):
        r, k = divmod(i, row_len)
        frac = k / max(row_len - 1, 1)
        x = -span / 2 + span * (frac if r % 2 == 0 else 1 - frac)
        poses.append(yaw_pose([x, y0 - r * min(gap, step_bound), 1.6], np.pi / 2 + jitter, -0.12))
    return poses, {"row_length": row_len}


def _random_walk(length, rng, step_bound):
    pos = np.array([rng.uniform(-4, 4), rng.uniform(-12, -9), 1.6])
    yaw = np.pi / 2
    poses = []
    for _ in range(length):
        poses.append(yaw_pose(pos, yaw, -0.12))
        yaw = float(np.clip(yaw + rng.normal(0, 0.06), np.pi / 4, 3 * np.pi / 4))
        step = rng.uniform(0.3, 0.9) * step_bound * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        nxt = pos + step
        nxt[0] = np.clip(nxt[0], -6, 6)
        nxt[1] = np.clip(nxt[1], -13, -8.5)
        pos = nxt
    return poses, {}


_BUILDERS = {"orbit": _orbit, "dolly": _dolly, "lawnmower": _lawnmower,
             "random-walk": _random_walk}


def generate_trajectory(kind: str, length: int, scene: SceneDescription, seed: int,
                        camera: Optional[CameraModel] = None, step_bound: float = 0.5,
                        min_overlap: float = 0.3, max_attempts: int = 100) -> Trajectory:
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    if kind not in _BUILDERS:
        raise ValueError(f"unknown trajectory kind {kind!r}; choose from {TRAJECTORY_KINDS}")
    camera = camera or CameraModel.from_fov(64, 64)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        poses, _ = _BUILDERS[kind](length, rng, step_bound)
        if _check_trajectory(scene, poses, camera, step_bound, min_overlap):
            return Trajectory(poses, camera, kind)
    raise RuntimeError(f"could not build a valid {kind} trajectory in {max_attempts} attempts")


def orbit_info(traj: Trajectory) -> dict:
    """Recover orbit center/radius for an orbit trajectory (center at camera height)."""
    c = traj.centers()
    center = np.array([0.0, 0.0, c[0, 2]])
    return {"center": center, "radius": np.linalg.norm(c - center, axis=1)}


def render_trajectory(scene: SceneDescription, traj: Trajectory) -> list[PosedFrame]:
    return [render_view(scene, p, traj.camera) for p in traj.poses]


def render_layout_maps(scene: SceneDescription, traj: Trajectory):
    """Per-pose (depth, semantic) maps from the scene layout."""
    out = []
    for p in traj.poses:
        f = render_view(scene, p, traj.camera)
        out.append((f.depth, f.semantic))
    return out


def classify_colors(image: np.ndarray) -> np.ndarray:
    """Nearest palette class by chromaticity (brightness-invariant), (H, W)."""
    eps = 1e-6
    chroma = image / (image.sum(-1, keepdims=True) + eps)
    pal = PALETTE / PALETTE.sum(-1, keepdims=True)
    d = ((chroma[..., None, :] - pal) ** 2).sum(-1)
    return d.argmin(-1)
