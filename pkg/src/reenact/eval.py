"""Metrics for self- and cross-driven evaluation on synthetic clips.

Frames are float arrays in [0, 1] shaped ``(T, H, W, 3)`` (a single ``(H, W, 3)``
frame is promoted to ``T = 1``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError
from .synthdata.identity import marker_colors
from .synthdata.render import Keypoints, pixel_grid
from .synthdata.scene import KEYPOINT_INDEX, MARKERS

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

MARKER_COLOR_TOL = 0.3
MARKER_MIN_MASS = 0.5


def _as_clip(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidArgumentError(f"expected (T, H, W, 3) frames, got {x.shape}")
    return x


# ------------------------------------------------------------------- pixels


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two leading axes."""
    k = len(g)
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    img = np.tensordot(v, g, axes=([-1], [0]))
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=1)
    return np.tensordot(v, g, axes=([-1], [0]))


def ssim(pred, gt) -> float:
    """Mean SSIM of one H x W x C image pair, Gaussian 11x11 window, sigma 1.5."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def pixel_metrics(pred, gt) -> tuple[float, float, float]:
    """(L1, PSNR, SSIM) averaged over frames; PSNR is ``inf`` for identical frames."""
    p, g = _as_clip(pred), _as_clip(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {g.shape}")
    l1 = float(np.mean(np.abs(p - g)))
    psnrs = [psnr(a, b) for a, b in zip(p, g)]
    ps = math.inf if all(math.isinf(v) for v in psnrs) else float(np.mean([v for v in psnrs if not math.isinf(v)]))
    ss = float(np.mean([ssim(a, b) for a, b in zip(p, g)]))
    return l1, ps, ss


# ---------------------------------------------------------------- landmarks


def detect_markers(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Color-centroid detection of every joint marker.

    Each pixel votes for a marker with weight ``(1 - d / tol)^2`` where ``d``
    is its RGB distance to the marker color.

    Returns:
        (positions M x 2 in pixels, detected M bool)
    """
    frame = np.asarray(frame, np.float64)
    colors = marker_colors(len(MARKERS))
    d = np.linalg.norm(frame[None] - colors[:, None, None, :], axis=-1)
    w = np.clip(1.0 - d / MARKER_COLOR_TOL, 0.0, 1.0) ** 2
    mass = w.sum(axis=(1, 2))
    grid = pixel_grid(frame.shape[0])
    pos = np.einsum("mhw,hwc->mc", w, grid) / np.maximum(mass, 1e-12)[:, None]
    return pos, mass >= MARKER_MIN_MASS


@dataclass
class LandmarkDistance:
    face: float
    body: float
    hand: float
    degenerate: bool
    detected_fraction: float


def landmark_distance(pred, gt_keypoints: Sequence[Keypoints], cap: float | None = None) -> LandmarkDistance:
    """Mean pixel distance between detected markers and ground-truth keypoints.

    Undetected markers count ``cap`` pixels (default a quarter of the image
    side). Keypoints flagged occluded in the ground truth are skipped.
    """
    frames = _as_clip(pred)
    if len(frames) != len(gt_keypoints):
        raise InvalidArgumentError("one keypoint set per frame required")
    res = frames.shape[1]
    cap = 0.25 * res if cap is None else cap
    sums = {"face": [], "body": [], "hand": []}
    found_any, n_found, n_total = False, 0, 0
    for frame, kp in zip(frames, gt_keypoints):
        pos, found = detect_markers(frame)
        for m, (_, kp_name, group) in enumerate(MARKERS):
            idx = KEYPOINT_INDEX[kp_name]
            if kp.occluded[idx]:
                continue
            n_total += 1
            if found[m]:
                found_any = True
                n_found += 1
                sums[group].append(float(np.hypot(*(pos[m] - kp.xy[idx]))))
            else:
                sums[group].append(cap)
    mean = {k: float(np.mean(v)) if v else cap for k, v in sums.items()}
    return LandmarkDistance(
        face=mean["face"], body=mean["body"], hand=mean["hand"],
        degenerate=not found_any, detected_fraction=n_found / max(n_total, 1),
    )


# ------------------------------------------------------------- flow warping


def warp_frame(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``img`` at ``p + flow(p)``; out-of-range taps clamp to the border."""
    img = np.asarray(img, np.float64)
    flow = np.asarray(flow, np.float64)
    H, W = img.shape[:2]
    grid = pixel_grid(H)
    q = grid + flow
    x0 = np.floor(q[..., 0]).astype(np.int64)
    y0 = np.floor(q[..., 1]).astype(np.int64)
    fx = (q[..., 0] - x0)[..., None]
    fy = (q[..., 1] - y0)[..., None]

    def tap(y, x):
        return img[np.clip(y, 0, H - 1), np.clip(x, 0, W - 1)]

    return (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )


def flow_warp_error(pred, flow_gt, valid_masks=None) -> float:
    """Mean over frame pairs of the masked L1 between ``warp(pred_t)`` and ``pred_{t+1}``."""
    frames = _as_clip(pred)
    flow_gt = np.asarray(flow_gt)
    if len(flow_gt) != len(frames) - 1:
        raise InvalidArgumentError(f"need {len(frames) - 1} flow fields, got {len(flow_gt)}")
    if len(frames) < 2:
        return 0.0
    if valid_masks is None:
        valid_masks = np.ones(flow_gt.shape[:3], dtype=bool)
    errs = []
    for t in range(len(frames) - 1):
        m = np.asarray(valid_masks[t], bool)
        if not m.any():
            continue
        diff = np.abs(warp_frame(frames[t], flow_gt[t]) - frames[t + 1])
        errs.append(float(diff[m].mean()))
    return float(np.mean(errs)) if errs else 0.0


# ------------------------------------------------------------------ reports

METRIC_GROUPS = {
    "Visual Quality": ("L1", "SSIM", "PSNR"),
    "Landmark Distance": ("Face", "Body", "Hand"),
    "Temporal Coherence": ("Lwp",),
}


def evaluate_clip(pred, gt_frames, gt_keypoints, flow_gt, flow_valid) -> dict[str, float]:
    l1, ps, ss = pixel_metrics(pred, gt_frames)
    lm = landmark_distance(pred, gt_keypoints)
    return {
        "L1": l1, "SSIM": ss, "PSNR": ps,
        "Face": lm.face, "Body": lm.body, "Hand": lm.hand,
        "Lwp": flow_warp_error(pred, flow_gt, flow_valid),
    }


@dataclass
class MetricReport:
    """Per-clip metrics and their uniform (per-clip) means."""

    per_clip: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    resolution: int | None = None

    @property
    def clip_ids(self) -> list[str]:
        return list(self.per_clip)

    def add(self, clip_id: str, metrics: dict[str, float]) -> None:
        self.per_clip[clip_id] = dict(metrics)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.per_clip:
            return {}
        keys = next(iter(self.per_clip.values())).keys()
        return {k: float(np.mean([m[k] for m in self.per_clip.values()])) for k in keys}

    def to_json(self) -> str:
        d = asdict(self)
        d["clip_ids"] = self.clip_ids
        d["aggregate"] = self.aggregate
        d["landmark_units"] = f"pixels at {self.resolution}x{self.resolution}"
        return json.dumps(d, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def format_table(self) -> str:
        cols = [c for g in METRIC_GROUPS.values() for c in g]
        header1 = f"{'clip':<24}" + "".join(f"| {g:<{10 * len(c) - 2}}" for g, c in METRIC_GROUPS.items())
        header2 = f"{'':<24}" + "".join(f"{c:>10}" for c in cols)
        lines = [f"landmark distances in pixels at {self.resolution}x{self.resolution}", header1, header2]
        rows = list(self.per_clip.items()) + ([("mean", self.aggregate)] if self.per_clip else [])
        for cid, m in rows:
            lines.append(f"{cid:<24}" + "".join(f"{m.get(c, float('nan')):>10.4g}" for c in cols))
        return "\n".join(lines)


# ------------------------------------------------- learned-feature metrics


class FeatureExtractor(Protocol):
    """Maps a directory of frames to an (N, D) feature matrix."""

    def __call__(self, frames_dir: Path) -> np.ndarray: ...


_EXTRACTORS: dict[str, FeatureExtractor] = {}


def register_extractor(name: str, fn: FeatureExtractor) -> None:
    _EXTRACTORS[name] = fn


def get_extractor(name: str) -> FeatureExtractor:
    if name not in _EXTRACTORS:
        raise KeyError(f"no feature extractor registered as {name!r}; none ships with this package")
    return _EXTRACTORS[name]


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    ca, cb = np.cov(feats_a, rowvar=False), np.cov(feats_b, rowvar=False)
    covmean, _ = linalg.sqrtm(ca @ cb, disp=False)
    covmean = covmean.real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * covmean))


def feature_metric(name: str, pred_dir: Path, gt_dir: Path, metric: Callable = frechet_distance) -> float:
    fn = get_extractor(name)
    return metric(fn(Path(pred_dir)), fn(Path(gt_dir)))
