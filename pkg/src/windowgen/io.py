"""On-disk formats: PNG frames, raw arrays with JSON headers, atomic JSON writes."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, Pose


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def save_array(path, arr: np.ndarray) -> None:
    """Write ``<path>.bin`` (raw little-endian, C order) and ``<path>.json`` header."""
    path = Path(path)
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr.astype(dt, copy=False).tofile(path.with_suffix(".bin"))
    write_json_atomic(path.with_suffix(".json"),
                      {"dtype": dt.str, "shape": list(arr.shape), "order": "C"})


def load_array(path) -> np.ndarray:
    path = Path(path)
    header = read_json(path.with_suffix(".json"))
    data = np.fromfile(path.with_suffix(".bin"), dtype=np.dtype(header["dtype"]))
    return data.reshape(header["shape"])


def save_png(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so in-memory frames match what PNG stores."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) / 255.0


def camera_to_dict(camera: CameraModel) -> dict:
    return {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "width": camera.width, "height": camera.height}


def camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def pose_from_list(m) -> Pose:
    m = np.asarray(m, dtype=np.float64)
    return Pose(m[:3, :3], m[:3, 3])


def write_frames(out_dir, frames, poses, camera, extra: dict | None = None) -> None:
    """Frame directory: frame_XXXX.png plus poses.json (camera + 3x4 camera-to-world)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames):
        save_png(out_dir / f"frame_{i:04d}.png", img)
    doc = {"camera": camera_to_dict(camera), "poses": [p.to_list() for p in poses]}
    if extra:
        doc.update(extra)
    write_json_atomic(out_dir / "poses.json", doc)


def read_frames(in_dir):
    in_dir = Path(in_dir)
    doc = read_json(in_dir / "poses.json")
    files = sorted(in_dir.glob("frame_*.png"))
    frames = [load_png(f) for f in files]
    poses = [pose_from_list(m) for m in doc["poses"]]
    return frames, poses, camera_from_dict(doc["camera"])
