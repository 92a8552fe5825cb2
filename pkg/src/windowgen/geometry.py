"""Camera geometry: rays, Plücker maps, unprojection, z-buffer splatting, overlap.

Conventions: OpenCV-style cameras (x right, y down, z forward), poses are
camera-to-world, pixel centers sit at integer + 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 20.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraModel":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def scaled(self, factor: float) -> "CameraModel":
        """Camera for an image resized by ``factor`` (e.g. 1/8 for the latent grid)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return replace(self, fx=self.fx * factor, fy=self.fy * factor,
                       cx=self.cx * factor, cy=self.cy * factor, width=w, height=h)

    def resized_to(self, height: int, width: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        return CameraModel(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def as_vector(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform; ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse_matrix(self) -> np.ndarray:
        """World-to-camera 4x4."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return m

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def to_list(self) -> list[list[float]]:
        return self.matrix()[:3].tolist()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``eye`` looking at ``target`` with world ``up`` (z-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def yaw_pose(position, yaw: float, pitch: float = 0.0) -> Pose:
    """Horizontal-ish camera at ``position`` facing heading ``yaw`` (radians, 0 = +x)."""
    d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    return look_at(position, np.asarray(position, dtype=np.float64) + d)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                       indexing="ij")
    return u + 0.5, v + 0.5


def camera_rays(camera: CameraModel, pose: Pose, normalize: bool = True):
    """Per-pixel ray origins and world directions, each (H, W, 3).

    With ``normalize=False`` directions have unit z in the camera frame, so
    ``origin + z_depth * direction`` is the surface point.
    """
    u, v = pixel_grid(camera.height, camera.width)
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=-1)
    d = d_cam @ pose.rotation.T
    if normalize:
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def compute_plucker_map(camera: CameraModel, pose: Pose) -> np.ndarray:
    """H x W x 6 map of (unit direction, moment = origin x direction)."""
    o, d = camera_rays(camera, pose)
    return np.concatenate([d, np.cross(o, d)], axis=-1)


def unproject_with_distance(raw_distance, rays_o, rays_d, near: float = DEFAULT_NEAR,
                            far: float = DEFAULT_FAR):
    """Map unbounded raw distances to points at sigmoid-interpolated range [near, far].

    Works on numpy arrays or torch tensors; ``raw_distance`` is (..., 1).
    """
    if not far > near > 0:
        raise ValueError(f"need far > near > 0, got near={near}, far={far}")
    if isinstance(raw_distance, torch.Tensor):
        w = torch.sigmoid(raw_distance)
    else:
        w = 1.0 / (1.0 + np.exp(-np.asarray(raw_distance, dtype=np.float64)))
    return rays_o + rays_d * (near * (1 - w) + far * w)


def distance_from_raw(raw_distance, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR):
    if not far > near > 0:
        raise ValueError(f"need far > near > 0, got near={near}, far={far}")
    w = torch.sigmoid(raw_distance) if isinstance(raw_distance, torch.Tensor) else \
        1.0 / (1.0 + np.exp(-np.asarray(raw_distance, dtype=np.float64)))
    return near * (1 - w) + far * w


def unproject_depth(depth: np.ndarray, camera: CameraModel, pose: Pose) -> np.ndarray:
    """Lift an (H, W) or (H, W, 1) z-depth map to world points (H, W, 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., 0]
    if depth.shape != (camera.height, camera.width):
        camera = camera.resized_to(*depth.shape)
    o, d = camera_rays(camera, pose, normalize=False)
    return o + d * depth[..., None]


def project_points(points: np.ndarray, camera: CameraModel, pose: Pose):
    """World points (K, 3) -> pixel coords (K, 2) and camera-frame z (K,)."""
    pc = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.fx * pc[:, 0] / z + camera.cx
        y = camera.fy * pc[:, 1] / z + camera.cy
    return np.stack([x, y], axis=-1), z


@dataclass
class FeaturePointCloud:
    points: torch.Tensor          # (K, 3)
    features: torch.Tensor        # (K, c)
    source_view_ids: torch.Tensor  # (K,) int64

    def __post_init__(self):
        if self.points.shape[0] != self.features.shape[0] or \
                self.points.shape[0] != self.source_view_ids.shape[0]:
            raise ValueError("points, features and source_view_ids must share the first axis")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class RenderedCondition:
    features: torch.Tensor    # (N, h, w, c), zero where invisible
    depths: torch.Tensor      # (N, h, w, 1), z-depth; 0 where invisible
    visibility: torch.Tensor  # (N, h, w) bool
    winners: torch.Tensor     # (N, h, w) int64 point index, -1 where invisible


def zbuffer_winners(points: np.ndarray, view_ids: np.ndarray, camera: CameraModel,
                    pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel index of the nearest projecting point (-1 if none) and its z.

    Ties on depth go to the lowest source view id, then the lowest point index.
    """
    h, w = camera.height, camera.width
    xy, z = project_points(points, camera, pose)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(xy).all(axis=1) & (z > 0)
    px = np.floor(np.where(ok, xy[:, 0], -1)).astype(np.int64)
    py = np.floor(np.where(ok, xy[:, 1], -1)).astype(np.int64)
    ok &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx = np.nonzero(ok)[0]
    winners = np.full(h * w, -1, dtype=np.int64)
    zbuf = np.zeros(h * w)
    if idx.size:
        pix = py[idx] * w + px[idx]
        order = np.lexsort((idx, view_ids[idx], z[idx], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        sel = order[first]
        winners[pix[sel]] = idx[sel]
        zbuf[pix[sel]] = z[idx[sel]]
    return winners.reshape(h, w), zbuf.reshape(h, w)


def splat_render(cloud: FeaturePointCloud,
                 targets: Sequence[tuple[CameraModel, Pose]]) -> RenderedCondition:
    """Nearest-point z-buffer render of point features into each target view.

    Winner selection is not differentiated; gradients reach the winners'
    features and their camera-frame depth.
    """
    if len(cloud) == 0:
        raise ValueError("cannot render an empty point cloud")
    pts_np = cloud.points.detach().cpu().numpy().astype(np.float64)
    ids_np = cloud.source_view_ids.detach().cpu().numpy()
    feats, depths, vis, wins = [], [], [], []
    c = cloud.features.shape[1]
    for camera, pose in targets:
        win, _ = zbuffer_winners(pts_np, ids_np, camera, pose)
        win_t = torch.from_numpy(win).to(cloud.points.device)
        visible = win_t >= 0
        safe = win_t.clamp(min=0).reshape(-1)
        R = torch.as_tensor(pose.rotation, dtype=cloud.points.dtype, device=cloud.points.device)
        t = torch.as_tensor(pose.translation, dtype=cloud.points.dtype, device=cloud.points.device)
        z = ((cloud.points[safe] - t) @ R[:, 2]).reshape(camera.height, camera.width, 1)
        f = cloud.features[safe].reshape(camera.height, camera.width, c)
        m = visible[..., None]
        feats.append(torch.where(m, f, torch.zeros_like(f)))
        depths.append(torch.where(m, z, torch.zeros_like(z)))
        vis.append(visible)
        wins.append(win_t)
    return RenderedCondition(torch.stack(feats), torch.stack(depths), torch.stack(vis),
                             torch.stack(wins))


def frustum_overlap_score(depth: np.ndarray, pose: Pose, window_poses: Sequence[Pose],
                          camera: CameraModel) -> float:
    """Mean over window poses of the fraction of the candidate's surface points
    that land inside the window camera's image with positive depth."""
    pts = unproject_depth(depth, camera, pose).reshape(-1, 3)
    pts = pts[np.isfinite(pts).all(axis=1)]
    if len(pts) == 0 or len(window_poses) == 0:
        return 0.0
    fractions = []
    for wp in window_poses:
        xy, z = project_points(pts, camera, wp)
        with np.errstate(invalid="ignore"):
            inside = (z > 0) & (xy[:, 0] >= 0) & (xy[:, 0] < camera.width) & \
                     (xy[:, 1] >= 0) & (xy[:, 1] < camera.height)
        fractions.append(inside.mean())
    return float(np.mean(fractions))
