"""Photometric and pose metrics, trajectory alignment, and run manifests."""
from __future__ import annotations

import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial.transform import Rotation
from skimage.metrics import structural_similarity

from .geometry import Pose
from .io import write_json_atomic

INF_SENTINEL = "+inf"


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5) and the usual K1/K2 constants."""
    a, b = _check_pair(a, b)
    channel_axis = -1 if a.ndim == 3 else None
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False,
                                       channel_axis=channel_axis))


# ------------------------------------------------------------------ trajectories

def _matrices(poses) -> np.ndarray:
    return np.stack([p.matrix() if isinstance(p, Pose) else np.asarray(p, float) for p in poses])


def path_length(poses) -> float:
    c = _matrices(poses)[:, :3, 3]
    return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())


@dataclass
class Alignment:
    poses: list
    scale: float
    transform: np.ndarray     # rigid 4x4 applied before scaling


def align_trajectory(estimated, reference) -> Alignment:
    """Map estimated pose 0 onto reference pose 0, then match path lengths.

    Scaling acts on camera centers about the first one.
    """
    est, ref = _matrices(estimated), _matrices(reference)
    if len(est) != len(ref) or len(est) < 2:
        raise ValueError("alignment needs two trajectories of equal length >= 2")
    transform = ref[0] @ np.linalg.inv(est[0])
    moved = transform @ est
    est_len = path_length(moved)
    if est_len <= 0.0:
        raise ValueError("estimated trajectory has zero path length; scale is undefined")
    scale = path_length(ref) / est_len
    c0 = moved[0, :3, 3].copy()
    moved[:, :3, 3] = c0 + scale * (moved[:, :3, 3] - c0)
    return Alignment([Pose.from_matrix(m) for m in moved], scale, transform)


def pose_metrics(aligned, reference) -> tuple[float, float]:
    """Mean geodesic rotation error (radians) and mean camera-center distance."""
    a, r = _matrices(aligned), _matrices(reference)
    if len(a) != len(r):
        raise ValueError("pose_metrics needs equal-length trajectories")
    rel = np.einsum("nij,nkj->nik", a[:, :3, :3], r[:, :3, :3])
    cos = (np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0
    r_dist = float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))
    t_dist = float(np.mean(np.linalg.norm(a[:, :3, 3] - r[:, :3, 3], axis=1)))
    return r_dist, t_dist


def keyframe_indices(total_frames: int, every: int = 10, limit: int = 200) -> list[int]:
    if total_frames < 1:
        raise ValueError("need at least one frame")
    last = min(limit, ((total_frames - 1) // every) * every)
    return list(range(0, last + 1, every))


def oracle_pose_estimator(reference, rot_noise_deg: float = 0.0, trans_noise: float = 0.0,
                          scale: float = 1.0, seed: int = 0) -> list:
    """Stand-in pose estimator: ground truth with seeded noise and a global scale."""
    rng = np.random.default_rng(seed)
    ref = _matrices(reference)
    out = []
    c0 = ref[0, :3, 3]
    for m in ref:
        m = m.copy()
        if rot_noise_deg > 0:
            rv = rng.normal(size=3)
            rv *= np.deg2rad(rot_noise_deg) / max(np.linalg.norm(rv), 1e-12)
            m[:3, :3] = Rotation.from_rotvec(rv).as_matrix() @ m[:3, :3]
        m[:3, 3] = c0 + scale * (m[:3, 3] - c0) + trans_noise * rng.normal(size=3)
        out.append(Pose.from_matrix(m))
    return out


# ------------------------------------------------------------------ distribution distance

def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two (n, d) feature sets."""
    feat_a = np.asarray(feat_a, np.float64)
    feat_b = np.asarray(feat_b, np.float64)
    if len(feat_a) == 0 or len(feat_b) == 0:
        raise ValueError("both feature sets must be nonempty")
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    d = feat_a.shape[1]
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False, bias=True)) + eps * np.eye(d)
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False, bias=True)) + eps * np.eye(d)
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    covmean = np.real(covmean)
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(dist, 0.0)


def latent_features(latents) -> np.ndarray:
    """Per-frame channel means of (n, h, w, c) latents."""
    z = np.asarray(latents, np.float64)
    return z.reshape(z.shape[0], -1, z.shape[-1]).mean(1)


def latent_fid_stub(set_a, set_b, ae=None) -> float:
    """Frechet distance in the frozen autoencoder's latent space.

    With ``ae`` the inputs are (n, H, W, 3) frames; without it they are latents.
    Not comparable to Inception-based FID numbers.
    """
    if ae is not None:
        import torch
        dtype = next(ae.parameters()).dtype
        with torch.no_grad():
            set_a = ae.encode(torch.as_tensor(np.asarray(set_a), dtype=dtype)).numpy()
            set_b = ae.encode(torch.as_tensor(np.asarray(set_b), dtype=dtype)).numpy()
    return frechet_distance(latent_features(set_a), latent_features(set_b))


# ------------------------------------------------------------------ reports

def _num(x: float):
    return INF_SENTINEL if x == math.inf else x


@dataclass
class MetricReport:
    psnr: list
    ssim: list
    r_dist: Optional[float] = None
    t_dist: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = [_num(v) for v in self.psnr]
        d["mean_psnr"] = _num(self.mean_psnr)
        d["mean_ssim"] = self.mean_ssim
        return d


def frame_report(generated: Sequence, reference: Sequence, indices=None) -> MetricReport:
    if len(generated) != len(reference):
        raise ValueError("generated and reference clips differ in length")
    idx = range(len(generated)) if indices is None else indices
    return MetricReport([psnr(generated[i], reference[i]) for i in idx],
                        [ssim(generated[i], reference[i]) for i in idx])


# ------------------------------------------------------------------ manifests

def version_string() -> str:
    """git-describe style version of the working tree, or a fallback."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "0.0.0-unknown"


def write_manifest(out_dir, **fields) -> Path:
    path = Path(out_dir) / "manifest.json"
    write_json_atomic(path, dict(fields, version=version_string()))
    return path
