"""Single-file checkpoint container with a table of named, hashed parameter groups.

Layout::

    b"WGCKPT01" | uint64 LE header length | JSON header | group blobs...

The header is canonical JSON (sorted keys, no whitespace) so a load/save
round trip reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"WGCKPT01"
GROUPS = ("ae", "ccn", "lrm", "backbone", "controlnet_scvg", "controlnet_depth",
          "controlnet_semantic")


class CheckpointError(RuntimeError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def module_to_group(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_group_into(module: torch.nn.Module, group: dict[str, np.ndarray]) -> None:
    ref = module.state_dict()
    state = {k: torch.from_numpy(np.array(v)).to(ref[k].dtype) for k, v in group.items()}
    module.load_state_dict(state)


@dataclass
class Checkpoint:
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    stage: str = "init"
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group_hash(self, name: str) -> str:
        return hashlib.sha256(_group_blob(self.groups[name])[0]).hexdigest()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.groups):
            h.update(name.encode())
            h.update(_group_blob(self.groups[name])[0])
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        table, blobs, offset = {}, [], 0
        for name in sorted(self.groups):
            blob, tensors = _group_blob(self.groups[name])
            table[name] = {"offset": offset, "nbytes": len(blob), "tensors": tensors,
                           "sha256": hashlib.sha256(blob).hexdigest()}
            blobs.append(blob)
            offset += len(blob)
        header = _canonical({"format": 1, "stage": self.stage, "config": self.config,
                             "meta": self.meta, "groups": table,
                             "content_hash": self.content_hash()})
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint container (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        base = 16 + hlen
        groups = {}
        for name, entry in header["groups"].items():
            blob = data[base + entry["offset"]: base + entry["offset"] + entry["nbytes"]]
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise CheckpointError(f"hash mismatch in parameter group {name!r}")
            group = {}
            for t in entry["tensors"]:
                raw = blob[t["offset"]: t["offset"] + t["nbytes"]]
                group[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(
                    t["shape"]).copy()
            groups[name] = group
        ck = cls(groups, header["stage"], header["config"], header["meta"])
        if ck.content_hash() != header["content_hash"]:
            raise CheckpointError("content hash mismatch")
        return ck

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def summary(self) -> dict:
        return {"stage": self.stage, "content_hash": self.content_hash(),
                "groups": {n: {"hash": self.group_hash(n),
                               "parameters": int(sum(v.size for v in g.values()))}
                           for n, g in sorted(self.groups.items())},
                "meta": self.meta}


def _group_blob(group: dict[str, np.ndarray]):
    parts, tensors, offset = [], [], 0
    for name, arr in group.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        tensors.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        parts.append(raw)
        offset += len(raw)
    return b"".join(parts), tensors
