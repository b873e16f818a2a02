"""Rasterization of appearance frames, motion guidance and ground-truth flow."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .identity import IdentityParams
from .motion import PoseState
from .scene import (
    KEYPOINT_INDEX,
    KEYPOINT_NAMES,
    KEYPOINT_OWNER,
    SIDES,
    Region,
    build_scene,
    marker_radius_px,
    canonical_to_pixel,
    pixel_to_canonical,
)

SUPPORTED_RESOLUTIONS = (32, 64, 128, 256, 512)

# OpenPose-style limb colors for the skeleton polylines.
SKELETON_EDGES = (
    ("neck", "l_shoulder", (1.0, 0.0, 0.0)),
    ("neck", "r_shoulder", (1.0, 0.33, 0.0)),
    ("l_shoulder", "l_elbow", (1.0, 0.67, 0.0)),
    ("l_elbow", "l_wrist", (1.0, 1.0, 0.0)),
    ("r_shoulder", "r_elbow", (0.67, 1.0, 0.0)),
    ("r_elbow", "r_wrist", (0.33, 1.0, 0.0)),
    ("neck", "nose", (0.0, 0.0, 1.0)),
)
FACE_COLOR = (0.55, 0.55, 0.62)
EYE_COLOR = (1.0, 1.0, 1.0)
MOUTH_COLOR = (0.9, 0.2, 0.3)
NOSE_COLOR = (0.2, 0.9, 0.9)
HAND_COLORS = {
    "l": {"palm": (0.95, 0.55, 0.95), "finger": (0.75, 0.35, 0.95)},
    "r": {"palm": (0.55, 0.95, 0.75), "finger": (0.35, 0.75, 0.55)},
}


class Keypoints:
    """Named 2D points in pixel coordinates (pixel centers at integers)."""

    __slots__ = ("xy", "occluded")

    def __init__(self, xy: np.ndarray, occluded: np.ndarray | None = None):
        self.xy = np.asarray(xy, dtype=np.float64)
        if self.xy.shape != (len(KEYPOINT_NAMES), 2):
            raise ValueError(f"expected ({len(KEYPOINT_NAMES)}, 2) keypoints, got {self.xy.shape}")
        self.occluded = (
            np.zeros(len(KEYPOINT_NAMES), dtype=bool) if occluded is None else np.asarray(occluded, dtype=bool)
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.xy[KEYPOINT_INDEX[name]]

    def __eq__(self, other):
        return (
            isinstance(other, Keypoints)
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.occluded, other.occluded)
        )

    def to_dict(self) -> dict:
        return {
            n: {"xy": [float(v) for v in self.xy[i]], "occluded": bool(self.occluded[i])}
            for i, n in enumerate(KEYPOINT_NAMES)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Keypoints":
        return cls(
            np.array([d[n]["xy"] for n in KEYPOINT_NAMES], dtype=np.float64),
            np.array([d[n]["occluded"] for n in KEYPOINT_NAMES], dtype=bool),
        )


@dataclass
class MotionGuidance:
    render: np.ndarray  # H x W x 3 float32 in [0, 1]
    hand_mask: np.ndarray  # H x W bool
    keypoints: Keypoints


@dataclass
class ClipSample:
    clip_id: str
    frames: np.ndarray  # T x H x W x 3 float32
    guidance: list[MotionGuidance]
    identity: IdentityParams
    flow_gt: np.ndarray  # T-1 x H x W x 2 float32, (dx, dy) from frame t+1 into frame t
    flow_valid: np.ndarray  # T-1 x H x W bool, False where occluded
    poses: list[PoseState] = field(default_factory=list)
    region_ids: np.ndarray | None = None  # T x H x W int16
    region_groups: tuple[str, ...] = ()

    def __post_init__(self):
        T = len(self.frames)
        if len(self.guidance) != T:
            raise ValueError("guidance and frames must have equal length")
        if len(self.flow_gt) != max(T - 1, 0) or len(self.flow_valid) != len(self.flow_gt):
            raise ValueError("flow_gt must hold T-1 fields")

    @property
    def resolution(self) -> int:
        return int(self.frames.shape[1])

    def __len__(self) -> int:
        return len(self.frames)


def pixel_grid(resolution: int) -> np.ndarray:
    """H x W x 2 array of (x, y) pixel-center coordinates."""
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def rasterize(regions: Sequence[Region], resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Painter's-algorithm point sampling at pixel centers -> (image, region ids)."""
    pc = pixel_to_canonical(pixel_grid(resolution), resolution)
    img = np.zeros((resolution, resolution, 3))
    ids = np.zeros((resolution, resolution), dtype=np.int16)
    for k, r in enumerate(regions):
        local = (pc - r.b) @ np.linalg.inv(r.A).T
        m = r.inside(local)
        if not m.any():
            continue
        loc = local[m]
        img[m] = r.color + loc @ r.grad.T
        ids[m] = k
    return np.clip(img, 0.0, 1.0).astype(np.float32), ids


def compute_flow(
    regions_t: Sequence[Region],
    regions_next: Sequence[Region],
    ids_t: np.ndarray,
    ids_next: np.ndarray,
    resolution: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward flow from frame t+1 into frame t, plus the validity mask.

    A pixel is valid when every bilinear neighbor it needs in frame t shows the
    same region it shows in frame t+1; elsewhere the surface point is occluded,
    disoccluded or straddles a boundary.
    """
    grid = pixel_grid(resolution)
    pc = pixel_to_canonical(grid, resolution)
    inv_next = np.stack([np.linalg.inv(r.A) for r in regions_next])
    b_next = np.stack([r.b for r in regions_next])
    A_t = np.stack([r.A for r in regions_t])
    b_t = np.stack([r.b for r in regions_t])
    k = ids_next.astype(np.int64)
    local = np.einsum("hwij,hwj->hwi", inv_next[k], pc - b_next[k])
    q = np.einsum("hwij,hwj->hwi", A_t[k], local) + b_t[k]
    q = canonical_to_pixel(q, resolution)
    snapped = np.round(q)
    q = np.where(np.abs(q - snapped) < 1e-9, snapped, q)
    flow = q - grid

    x0 = np.floor(q[..., 0]).astype(np.int64)
    y0 = np.floor(q[..., 1]).astype(np.int64)
    need_x1 = q[..., 0] > x0
    need_y1 = q[..., 1] > y0
    valid = np.ones(k.shape, dtype=bool)
    always = np.ones_like(valid)
    for dx, dy, need in ((0, 0, always), (1, 0, need_x1), (0, 1, need_y1), (1, 1, need_x1 & need_y1)):
        xs, ys = x0 + dx, y0 + dy
        inb = (xs >= 0) & (xs < resolution) & (ys >= 0) & (ys < resolution)
        same = np.zeros_like(valid)
        same[inb] = ids_t[ys[inb], xs[inb]] == k[inb]
        valid &= ~need | same
    return flow.astype(np.float32), valid


def _segment_mask(grid, a, b, half_width, pad=0.0, capsule=False):
    d = b - a
    length = float(np.hypot(*d))
    if length < 1e-12:
        return np.hypot(*(grid - a).transpose(2, 0, 1)) <= half_width
    u = d / length
    rel = grid - a
    t = rel @ u
    perp = np.abs(rel[..., 0] * u[1] - rel[..., 1] * u[0])
    if capsule:
        tc = np.clip(t, 0.0, length)
        return np.hypot(*(rel - tc[..., None] * u).transpose(2, 0, 1)) <= half_width
    return (t >= -pad) & (t <= length + pad) & (perp <= half_width)


def _ellipse_mask(grid, center, angle, rx, ry):
    rel = grid - center
    c, s = np.cos(angle), np.sin(angle)
    x = rel[..., 0] * c + rel[..., 1] * s
    y = -rel[..., 0] * s + rel[..., 1] * c
    return (x / rx) ** 2 + (y / ry) ** 2 <= 1.0


def render_guidance(
    keypoints: np.ndarray | Keypoints, face_coeffs: np.ndarray, resolution: int
) -> tuple[np.ndarray, np.ndarray]:
    """Render skeleton polylines, a shaded face and shaded hand polygons.

    The render depends only on keypoints and face shape coefficients, so a
    driving signal aligned to another identity can be re-rendered.

    Returns:
        (render H x W x 3 float32, hand_mask H x W bool)
    """
    kp = keypoints.xy if isinstance(keypoints, Keypoints) else np.asarray(keypoints, dtype=np.float64)
    P = {n: kp[i] for i, n in enumerate(KEYPOINT_NAMES)}
    grid = pixel_grid(resolution)
    img = np.zeros((resolution, resolution, 3))
    unit = float(np.hypot(*(P["l_shoulder"] - P["r_shoulder"])))
    line_hw = 1.0  # 2-px polylines

    for a, b, col in SKELETON_EDGES:
        img[_segment_mask(grid, P[a], P[b], line_hw, capsule=True)] = col

    fc = np.asarray(face_coeffs, dtype=np.float64)
    eye_axis = P["r_eye"] - P["l_eye"]
    angle = float(np.arctan2(eye_axis[1], eye_axis[0]))
    rx, ry = unit * 0.34 * (1 + 0.15 * fc[0]), unit * 0.42 * (1 + 0.12 * fc[1])
    img[_ellipse_mask(grid, P["head_center"], angle, rx, ry)] = FACE_COLOR
    dot = max(0.7, 0.03 * unit)
    eye_w = max(dot, unit * 0.055 * (1 + 0.2 * fc[2]))
    for side in SIDES:
        eye_h = max(dot, 0.5 * np.hypot(*(P[f"{side}_eye_top"] - P[f"{side}_eye_bottom"])))
        img[_ellipse_mask(grid, P[f"{side}_eye"], angle, eye_w, eye_h)] = EYE_COLOR
    mouth_c = 0.5 * (P["mouth_top"] + P["mouth_bottom"])
    mouth_h = max(dot, 0.5 * np.hypot(*(P["mouth_top"] - P["mouth_bottom"])))
    mouth_w = max(dot, unit * 0.09 * (1 + 0.2 * fc[3]))
    img[_ellipse_mask(grid, mouth_c, angle, mouth_w, mouth_h)] = MOUTH_COLOR
    img[_ellipse_mask(grid, P["nose"], angle, dot, dot)] = NOSE_COLOR

    hand_mask = np.zeros((resolution, resolution), dtype=bool)
    palm_dot = marker_radius_px(resolution) + 0.25
    for side in SIDES:
        cols = HAND_COLORS[side]
        spread = P[f"{side}_index_base"] - P[f"{side}_pinky_base"]
        hand_unit = float(np.hypot(*spread)) / 0.15
        knuckles = 0.5 * (P[f"{side}_index_base"] + P[f"{side}_pinky_base"])
        wrist = P[f"{side}_wrist"]
        axis = knuckles - wrist
        axis_u = axis / max(np.hypot(*axis), 1e-12)
        m = _segment_mask(grid, wrist - 0.03 * hand_unit * axis_u, knuckles,
                          0.5 * np.hypot(*spread) + 0.05 * hand_unit, pad=0.02 * hand_unit)
        # palm landmark dot, wide enough to cover the painted hand marker
        m |= _ellipse_mask(grid, P[f"{side}_palm"], 0.0, palm_dot, palm_dot)
        img[m] = cols["palm"]
        hand_mask |= m
        for f in ("thumb", "index", "middle", "ring", "pinky"):
            hw = (0.045 if f == "thumb" else 0.035) * hand_unit
            m = _segment_mask(grid, P[f"{side}_{f}_base"], P[f"{side}_{f}_tip"], hw, pad=0.02 * hand_unit)
            img[m] = cols["finger"]
            hand_mask |= m
    return img.astype(np.float32), hand_mask


def hand_mask_from_guidance(render: np.ndarray, tol: float = 2.5 / 255) -> np.ndarray:
    """Recover the hand mask from a guidance render via its reserved hand colors."""
    render = np.asarray(render, dtype=np.float64)
    mask = np.zeros(render.shape[:2], dtype=bool)
    for cols in HAND_COLORS.values():
        for c in cols.values():
            mask |= np.all(np.abs(render - np.asarray(c)) <= tol, axis=-1)
    return mask


def _occlusion_flags(kp_px: np.ndarray, ids: np.ndarray, groups: Sequence[str]) -> np.ndarray:
    res = ids.shape[0]
    group_arr = np.asarray(groups)
    flags = np.zeros(len(KEYPOINT_NAMES), dtype=bool)
    for i, name in enumerate(KEYPOINT_NAMES):
        x, y = kp_px[i]
        if not (-0.5 <= x < res - 0.5 and -0.5 <= y < res - 0.5):
            flags[i] = True
            continue
        cx, cy = int(round(x)), int(round(y))
        patch = ids[max(cy - 1, 0): cy + 2, max(cx - 1, 0): cx + 2]
        flags[i] = not np.any(group_arr[patch] == KEYPOINT_OWNER[name])
    return flags


def render_frame(identity: IdentityParams, pose: PoseState, resolution: int):
    """Render one appearance frame -> (image, region ids, regions, keypoints in pixels)."""
    regions, kps = build_scene(identity, pose, resolution)
    img, ids = rasterize(regions, resolution)
    return img, ids, regions, canonical_to_pixel(kps, resolution)


def render_clip(
    identity: IdentityParams, poses: Sequence[PoseState], resolution: int, clip_id: str = "clip0000"
) -> ClipSample:
    """Render frames, guidance, hand masks, keypoints and exact backward flow."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; choose from {SUPPORTED_RESOLUTIONS}")
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    frames, ids_all, regions_all, guidance = [], [], [], []
    groups: tuple[str, ...] = ()
    for pose in poses:
        img, ids, regions, kp = render_frame(identity, pose, resolution)
        groups = tuple(r.group for r in regions)
        render, hand_mask = render_guidance(kp, identity.face_shape_coeffs, resolution)
        occluded = _occlusion_flags(kp, ids, groups)
        frames.append(img)
        ids_all.append(ids)
        regions_all.append(regions)
        guidance.append(MotionGuidance(render, hand_mask, Keypoints(kp, occluded)))
    flows, valids = [], []
    for t in range(len(poses) - 1):
        f, v = compute_flow(regions_all[t], regions_all[t + 1], ids_all[t], ids_all[t + 1], resolution)
        flows.append(f)
        valids.append(v)
    empty_flow = np.zeros((0, resolution, resolution, 2), np.float32)
    return ClipSample(
        clip_id=clip_id,
        frames=np.stack(frames),
        guidance=guidance,
        identity=identity,
        flow_gt=np.stack(flows) if flows else empty_flow,
        flow_valid=np.stack(valids) if valids else np.zeros((0, resolution, resolution), bool),
        poses=list(poses),
        region_ids=np.stack(ids_all),
        region_groups=groups,
    )
