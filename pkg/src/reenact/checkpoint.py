"""Single-file binary checkpoints.

Layout (little-endian)::

    magic  b"RCKP"        4 bytes
    version               uint32
    meta_len              uint32
    meta                  UTF-8 JSON (configs, step, RNG state, section table)
    sections              raw blobs, concatenated in table order

Each section-table entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with offsets relative to the start of the blob area. Parameters and buffers are
stored as float32; RNG state as uint8.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigValidationError

MAGIC = b"RCKP"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_DTYPES = {"f32": "<f4", "u8": "u1", "i64": "<i8"}


class CheckpointError(OSError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def state_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        out = {}
        for k, v in self.tensors.items():
            if k.startswith("rng.") or not k.startswith(prefix):
                continue
            out[k[len(prefix):]] = torch.from_numpy(np.array(v, dtype=np.float32))
        return out


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.uint8:
        return "u8"
    if arr.dtype == np.int64:
        return "i64"
    return "f32"


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray | torch.Tensor], meta: dict) -> None:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta_bytes = json.dumps({**meta, "sections": table}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_HEAD.pack(MAGIC, VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(data[_HEAD.size:_HEAD.size + meta_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    base = _HEAD.size + meta_len
    tensors = {}
    for sec in meta.pop("sections"):
        start = base + sec["offset"]
        if start + sec["nbytes"] > len(data):
            raise CheckpointError(f"{path}: section {sec['name']} is truncated")
        arr = np.frombuffer(data, dtype=_DTYPES[sec["dtype"]], count=sec["nbytes"] // np.dtype(_DTYPES[sec["dtype"]]).itemsize,
                            offset=start)
        tensors[sec["name"]] = arr.reshape(sec["shape"]).copy()
    return Checkpoint(tensors, meta)


def load_into(module: torch.nn.Module, ckpt: Checkpoint, prefix: str = "", strict: bool = True) -> list[str]:
    """Copy matching sections into ``module``; returns names that were loaded."""
    own = module.state_dict()
    state = ckpt.state_dict(prefix)
    loaded = []
    for name, value in state.items():
        if name not in own:
            if strict:
                raise ConfigValidationError(f"checkpoint section {prefix + name} has no matching parameter")
            continue
        if own[name].shape != value.shape:
            raise ConfigValidationError(
                f"checkpoint section {prefix + name} has shape {tuple(value.shape)}, model expects {tuple(own[name].shape)}"
            )
        loaded.append(name)
    module.load_state_dict({k: state[k] for k in loaded}, strict=False)
    return loaded
