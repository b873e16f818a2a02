"""On-disk dataset layout.

::

    root/manifest.json
    root/<identity_id>/<clip_id>/frames/00000.png
    root/<identity_id>/<clip_id>/guidance/00000.png
    root/<identity_id>/<clip_id>/hand_mask/00000.png
    root/<identity_id>/<clip_id>/keypoints.json
    root/<identity_id>/<clip_id>/flow.bin

``flow.bin`` is little-endian: a 20-byte header (magic ``b"RFLW"``, then
uint32 version, pair count N, height H, width W), N x H x W x 2 float32 flow
vectors (dx, dy) mapping frame t+1 pixels into frame t, then N x H x W uint8
validity flags (1 = not occluded).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock
from PIL import Image

from .identity import IdentityParams
from .motion import PoseState
from .render import ClipSample, Keypoints, MotionGuidance

FLOW_MAGIC = b"RFLW"
FLOW_VERSION = 1
_FLOW_HEADER = struct.Struct("<4sIIII")
MANIFEST_VERSION = 1


class DatasetIOError(OSError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_flow(path: Path, flow: np.ndarray, valid: np.ndarray) -> None:
    n = len(flow)
    h, w = (flow.shape[1], flow.shape[2]) if n else (0, 0)
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, n, h, w))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(valid, dtype=np.uint8).tobytes())


def read_flow(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    magic, version, n, h, w = _FLOW_HEADER.unpack_from(data)
    if magic != FLOW_MAGIC or version != FLOW_VERSION:
        raise DatasetIOError(f"{path}: not a version-{FLOW_VERSION} flow file")
    off = _FLOW_HEADER.size
    flow = np.frombuffer(data, dtype="<f4", count=n * h * w * 2, offset=off).reshape(n, h, w, 2)
    valid = np.frombuffer(data, dtype=np.uint8, count=n * h * w, offset=off + flow.nbytes).reshape(n, h, w)
    return flow.astype(np.float32), valid.astype(bool)


def _write_clip(sample: ClipSample, clip_dir: Path, fps: float) -> None:
    for sub in ("frames", "guidance", "hand_mask"):
        (clip_dir / sub).mkdir(parents=True, exist_ok=True)
    for t in range(len(sample)):
        save_png(clip_dir / "frames" / f"{t:05d}.png", sample.frames[t])
        save_png(clip_dir / "guidance" / f"{t:05d}.png", sample.guidance[t].render)
        Image.fromarray(sample.guidance[t].hand_mask.astype(np.uint8) * 255).save(
            clip_dir / "hand_mask" / f"{t:05d}.png"
        )
    meta = {
        "clip_id": sample.clip_id,
        "resolution": sample.resolution,
        "fps": fps,
        "identity": sample.identity.to_dict(),
        "keypoints": [g.keypoints.to_dict() for g in sample.guidance],
        "poses": [p.to_dict() for p in sample.poses],
    }
    (clip_dir / "keypoints.json").write_text(json.dumps(meta))
    write_flow(clip_dir / "flow.bin", sample.flow_gt, sample.flow_valid)


def write_dataset(samples: Sequence[ClipSample], root: str | os.PathLike, fps: float = 25.0) -> dict:
    """Write clips under ``root`` and merge them into ``root/manifest.json``."""
    root = Path(root)
    entries = []
    for sample in samples:
        rel = Path(sample.identity.identity_id) / sample.clip_id
        try:
            _write_clip(sample, root / rel, fps)
        except OSError as exc:
            raise DatasetIOError(f"failed writing clip to {root / rel}: {exc}") from exc
        entries.append(
            {
                "identity_id": sample.identity.identity_id,
                "clip_id": sample.clip_id,
                "T": len(sample),
                "resolution": sample.resolution,
                "path": rel.as_posix(),
            }
        )
    try:
        root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(root / ".manifest.lock")):
            manifest_path = root / "manifest.json"
            manifest = {"version": MANIFEST_VERSION, "clips": []}
            if manifest_path.exists():
                manifest = json.loads(manifest_path.read_text())
            new_paths = {e["path"] for e in entries}
            manifest["clips"] = [c for c in manifest["clips"] if c["path"] not in new_paths] + entries
            tmp = manifest_path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(manifest, indent=1))
            os.replace(tmp, manifest_path)
    except OSError as exc:
        raise DatasetIOError(f"failed writing manifest under {root}: {exc}") from exc
    return manifest


def read_manifest(root: str | os.PathLike) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc


def read_clip(clip_dir: str | os.PathLike) -> ClipSample:
    clip_dir = Path(clip_dir)
    try:
        meta = json.loads((clip_dir / "keypoints.json").read_text())
        T = len(meta["keypoints"])
        frames = np.stack([load_png(clip_dir / "frames" / f"{t:05d}.png") for t in range(T)])
        guidance = []
        for t in range(T):
            with Image.open(clip_dir / "hand_mask" / f"{t:05d}.png") as im:
                mask = np.asarray(im) > 127
            guidance.append(
                MotionGuidance(
                    load_png(clip_dir / "guidance" / f"{t:05d}.png"),
                    mask,
                    Keypoints.from_dict(meta["keypoints"][t]),
                )
            )
        flow, valid = read_flow(clip_dir / "flow.bin")
    except OSError as exc:
        raise DatasetIOError(f"cannot read clip {clip_dir}: {exc}") from exc
    return ClipSample(
        clip_id=meta["clip_id"],
        frames=frames,
        guidance=guidance,
        identity=IdentityParams.from_dict(meta["identity"]),
        flow_gt=flow,
        flow_valid=valid,
        poses=[PoseState.from_dict(p) for p in meta["poses"]],
    )


def read_dataset(root: str | os.PathLike) -> list[ClipSample]:
    root = Path(root)
    return [read_clip(root / entry["path"]) for entry in read_manifest(root)["clips"]]
