"""Avatar geometry.

A frame is a z-ordered list of regions. Each region owns an affine map from
its local (material) coordinates to canonical pixels, a shape test in local
coordinates and a color that is affine in local coordinates. Because both maps
are affine, bilinear resampling of a rendered frame reproduces the region's
colors exactly, which is what makes the ground-truth flow exact.

Skeleton bone ratios are shared by all identities: two identities in the same
pose have keypoints related by a uniform scale plus translation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .identity import CANONICAL_RES, REF_SHOULDER_WIDTH, IdentityParams
from .motion import PoseState

SIDES = ("l", "r")
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

UPPER_ARM = 0.8
FOREARM = 0.7
NECK_TO_HEAD = 0.62
HIP_PIVOT = 1.6
FINGER_LENGTHS = {"index": 0.19, "middle": 0.21, "ring": 0.2, "pinky": 0.16, "thumb": 0.16}
FINGER_LATERAL = {"index": 0.075, "middle": 0.025, "ring": -0.025, "pinky": -0.075}
PALM_LENGTH = 0.22
PALM_HALF_WIDTH = 0.1
FINGER_HALF_WIDTH = 0.0225
THUMB_HALF_WIDTH = 0.03
THUMB_BASE = (0.05, 0.09)

BODY_KEYPOINTS = ("neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist")
FACE_KEYPOINTS = (
    "head_center", "nose", "l_eye", "r_eye",
    "l_eye_top", "l_eye_bottom", "r_eye_top", "r_eye_bottom",
    "mouth_top", "mouth_bottom", "mouth_left", "mouth_right",
)
HAND_KEYPOINTS = tuple(
    f"{s}_{n}"
    for s in SIDES
    for n in ("palm",) + tuple(f"{f}_{e}" for f in FINGERS for e in ("base", "tip"))
)
KEYPOINT_NAMES = BODY_KEYPOINTS + FACE_KEYPOINTS + HAND_KEYPOINTS
KEYPOINT_INDEX = {n: i for i, n in enumerate(KEYPOINT_NAMES)}
KEYPOINT_GROUPS = {
    "body": [KEYPOINT_INDEX[n] for n in BODY_KEYPOINTS],
    "face": [KEYPOINT_INDEX[n] for n in FACE_KEYPOINTS],
    "hand": [KEYPOINT_INDEX[n] for n in HAND_KEYPOINTS],
}

# Color-coded joint markers painted on the avatar: (marker, keypoint, landmark group).
MARKERS = (
    ("neck", "neck", "body"),
    ("l_shoulder", "l_shoulder", "body"),
    ("r_shoulder", "r_shoulder", "body"),
    ("l_elbow", "l_elbow", "body"),
    ("r_elbow", "r_elbow", "body"),
    ("l_hand", "l_palm", "hand"),
    ("r_hand", "r_palm", "hand"),
    ("nose", "nose", "face"),
)


def marker_radius_px(resolution: int) -> float:
    return max(1.3, 0.03 * resolution)


@dataclass
class Region:
    name: str
    group: str  # keypoint ownership group, e.g. "head", "l_hand"
    kind: str  # "rect" | "trap" | "disc" | "all"
    params: tuple[float, ...]
    A: np.ndarray  # 2x2, local -> canonical
    b: np.ndarray  # 2, canonical
    color: np.ndarray  # 3, color at local origin
    grad: np.ndarray  # 3x2, color change per local unit

    def inside(self, local: np.ndarray) -> np.ndarray:
        x, y = local[..., 0], local[..., 1]
        if self.kind == "rect":
            x0, x1, hw = self.params
            return (x >= x0) & (x <= x1) & (np.abs(y) <= hw)
        if self.kind == "trap":
            x0, x1, w0, w1 = self.params
            t = np.clip((x - x0) / (x1 - x0), 0.0, 1.0)
            return (x >= x0) & (x <= x1) & (np.abs(y) <= w0 + (w1 - w0) * t)
        if self.kind == "disc":
            return x * x + y * y <= 1.0
        if self.kind == "all":
            return np.ones(x.shape, dtype=bool)
        raise ValueError(self.kind)


def rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _dir_from_down(a: float, side: float) -> float:
    """Angle of a unit vector rotated by ``a`` from straight down toward ``side``."""
    return float(np.arctan2(np.cos(a), side * np.sin(a)))


class _Builder:
    def __init__(self, identity: IdentityParams, pose: PoseState, marker_r: float):
        self.identity = identity
        self.pose = pose
        self.s = identity.shoulder_width
        self.marker_r = marker_r  # canonical px
        self.regions: list[Region] = []
        self.kps: dict[str, np.ndarray] = {}
        self.markers: list[Region] = []

    def gradient(self, name: str, mag: float) -> np.ndarray:
        # pure function of texture_seed and region name
        rng = np.random.default_rng([self.identity.texture_seed, zlib.crc32(name.encode())])
        return rng.uniform(-mag, mag, size=(3, 2))

    def frame(self, origin, angle, scale=None):
        scale = self.s if scale is None else scale
        return scale * rot(angle), np.asarray(origin, dtype=np.float64)

    def add(self, name, group, kind, params, A, b, color, grad_mag=0.05):
        self.regions.append(
            Region(name, group, kind, tuple(params), A, b, np.asarray(color, float),
                   self.gradient(name, grad_mag) if grad_mag > 0 else np.zeros((3, 2)))
        )

    def marker(self, name, group, point, color):
        # markers are an overlay: collected here, drawn after every body part
        A = self.marker_r * np.eye(2)
        self.markers.append(Region(f"marker_{name}", group, "disc", (), A, np.asarray(point, float),
                                   np.asarray(color, float), np.zeros((3, 2))))

    def point(self, A, b, local) -> np.ndarray:
        return A @ np.asarray(local, float) + b


def build_scene(identity: IdentityParams, pose: PoseState, resolution: int) -> tuple[list[Region], np.ndarray]:
    """Regions in draw order and keypoints, both in canonical pixel space."""
    from .identity import marker_colors

    marker_r = marker_radius_px(resolution) * CANONICAL_RES / resolution
    bld = _Builder(identity, pose, marker_r)
    s = bld.s
    pal = {k: np.asarray(v) for k, v in identity.palette.items()}
    prop = identity.proportions
    fc = identity.face_shape_coeffs
    ja = pose.joint_angles
    mcol = dict(zip([m[0] for m in MARKERS], marker_colors(len(MARKERS))))
    kps = bld.kps

    bld.add("background", "background", "all", (), CANONICAL_RES * np.eye(2),
            np.full(2, CANONICAL_RES / 2), pal["background"], 0.15)

    root = np.asarray(pose.root_position) * s / REF_SHOULDER_WIDTH
    lean = ja["torso_lean"]
    pivot = np.asarray(identity.anchor) + root + np.array([0.0, s * HIP_PIVOT])
    neck = pivot + s * rot(lean) @ np.array([0.0, -HIP_PIVOT])
    kps["neck"] = neck
    down = np.pi / 2 + lean

    # torso layer
    A, b = bld.frame(neck, down)
    top_w = 0.58
    bld.add("torso", "torso", "trap", (-0.08, prop["torso_length"], top_w, top_w * prop["torso_taper"]),
            A, b, pal["shirt"], 0.04)
    head_dir = -np.pi / 2 + lean + ja["neck_tilt"]
    A, b = bld.frame(neck, head_dir)
    bld.add("neck_part", "torso", "rect", (-0.05, 0.4, prop["neck_width"] / 2), A, b, pal["skin"] * 0.9)
    bld.marker("neck", "torso", neck, mcol["neck"])

    # head layer; head frame has x right, y down
    head_center = neck + s * np.array([np.cos(head_dir), np.sin(head_dir)]) * NECK_TO_HEAD
    A_h, b_h = bld.frame(head_center, lean + ja["neck_tilt"])
    rx = 0.34 * (1 + 0.15 * fc[0])
    ry = 0.42 * (1 + 0.12 * fc[1])
    bld.add("head", "head", "disc", (), A_h @ np.diag([rx, ry]), b_h, pal["skin"], 0.04)
    face_local = {
        "head_center": (0.0, 0.0),
        "nose": (0.0, 0.04),
        "l_eye": (-0.13, -0.07),
        "r_eye": (0.13, -0.07),
        "mouth_left": (-0.09, 0.2),
        "mouth_right": (0.09, 0.2),
    }
    eye_h = 0.005 + 0.035 * pose.eye_state
    mouth_h = 0.012 + 0.05 * pose.mouth_open
    for side in SIDES:
        ex, ey = face_local[f"{side}_eye"]
        face_local[f"{side}_eye_top"] = (ex, ey - eye_h)
        face_local[f"{side}_eye_bottom"] = (ex, ey + eye_h)
    face_local["mouth_top"] = (0.0, 0.2 - mouth_h)
    face_local["mouth_bottom"] = (0.0, 0.2 + mouth_h)
    for k, v in face_local.items():
        kps[k] = bld.point(A_h, b_h, v)
    eye_w = 0.055 * (1 + 0.2 * fc[2])
    for side in SIDES:
        c = bld.point(A_h, b_h, face_local[f"{side}_eye"])
        bld.add(f"{side}_eye_part", "head", "disc", (), A_h @ np.diag([eye_w, eye_h]), c, pal["eyes"], 0.0)
    mouth_w = 0.09 * (1 + 0.2 * fc[3])
    c = bld.point(A_h, b_h, (0.0, 0.2))
    bld.add("mouth_part", "head", "disc", (), A_h @ np.diag([mouth_w, mouth_h]), c, pal["mouth"], 0.0)
    bld.marker("nose", "head", kps["nose"], mcol["nose"])

    # arm layers: upper arms, then forearms
    lt = prop["limb_thickness"]
    arm = {}
    for side, sgn in zip(SIDES, (-1.0, 1.0)):
        shoulder = neck + s * rot(lean) @ np.array([0.5 * sgn, 0.0])
        a_u = _dir_from_down(ja[f"{side}_shoulder"], sgn) + lean
        elbow = shoulder + s * UPPER_ARM * np.array([np.cos(a_u), np.sin(a_u)])
        a_f = _dir_from_down(ja[f"{side}_shoulder"] - ja[f"{side}_elbow"], sgn) + lean
        wrist = elbow + s * FOREARM * np.array([np.cos(a_f), np.sin(a_f)])
        a_h = _dir_from_down(ja[f"{side}_shoulder"] - ja[f"{side}_elbow"] - ja[f"{side}_wrist"], sgn) + lean
        arm[side] = (sgn, shoulder, a_u, elbow, a_f, wrist, a_h)
        kps[f"{side}_shoulder"], kps[f"{side}_elbow"], kps[f"{side}_wrist"] = shoulder, elbow, wrist
    for side in SIDES:
        sgn, shoulder, a_u, *_ = arm[side]
        A, b = bld.frame(shoulder, a_u)
        bld.add(f"{side}_upper_arm", f"{side}_upper_arm", "rect", (-0.06, UPPER_ARM + 0.02, 0.1 * lt),
                A, b, pal["sleeve"])
        bld.marker(f"{side}_shoulder", f"{side}_upper_arm", shoulder, mcol[f"{side}_shoulder"])
    for side in SIDES:
        sgn, _, _, elbow, a_f, *_ = arm[side]
        A, b = bld.frame(elbow, a_f)
        bld.add(f"{side}_forearm", f"{side}_forearm", "rect", (-0.06, FOREARM + 0.02, 0.085 * lt),
                A, b, pal["skin"] * 0.95)
        bld.marker(f"{side}_elbow", f"{side}_forearm", elbow, mcol[f"{side}_elbow"])

    # hand layer
    for side in SIDES:
        sgn, *_, wrist, a_h = arm[side]
        thumb_side = -sgn
        A_w, b_w = bld.frame(wrist, a_h)
        group = f"{side}_hand"
        bld.add(f"{side}_palm", group, "rect", (-0.03, PALM_LENGTH, PALM_HALF_WIDTH), A_w, b_w, pal["skin"])
        curl = ja[f"{side}_fingers"]
        for f in FINGERS[1:]:
            base_local = np.array([PALM_LENGTH, thumb_side * FINGER_LATERAL[f]])
            base = bld.point(A_w, b_w, base_local)
            ang = a_h - thumb_side * 0.9 * curl
            A, b = bld.frame(base, ang)
            bld.add(f"{side}_{f}", group, "rect", (0.0, FINGER_LENGTHS[f], FINGER_HALF_WIDTH), A, b,
                    pal["skin"] * 0.9)
            kps[f"{side}_{f}_base"] = base
            kps[f"{side}_{f}_tip"] = bld.point(A, b, (FINGER_LENGTHS[f], 0.0))
        base = bld.point(A_w, b_w, (THUMB_BASE[0], thumb_side * THUMB_BASE[1]))
        ang = a_h + thumb_side * (1.0 - ja[f"{side}_thumb"])
        A, b = bld.frame(base, ang)
        bld.add(f"{side}_thumb", group, "rect", (0.0, FINGER_LENGTHS["thumb"], THUMB_HALF_WIDTH), A, b,
                pal["skin"] * 0.9)
        kps[f"{side}_thumb_base"] = base
        kps[f"{side}_thumb_tip"] = bld.point(A, b, (FINGER_LENGTHS["thumb"], 0.0))
        kps[f"{side}_palm"] = bld.point(A_w, b_w, (PALM_LENGTH / 2, 0.0))
        bld.marker(f"{side}_hand", group, kps[f"{side}_palm"], mcol[f"{side}_hand"])

    keypoints = np.stack([kps[n] for n in KEYPOINT_NAMES])
    return bld.regions + bld.markers, keypoints


KEYPOINT_OWNER = {
    **{n: "head" for n in FACE_KEYPOINTS},
    "neck": "torso",
    **{f"{s}_shoulder": f"{s}_upper_arm" for s in SIDES},
    **{f"{s}_elbow": f"{s}_forearm" for s in SIDES},
    **{f"{s}_wrist": f"{s}_hand" for s in SIDES},
    **{n: n.split("_")[0] + "_hand" for n in HAND_KEYPOINTS},
}


def canonical_to_pixel(points: np.ndarray, resolution: int) -> np.ndarray:
    """Canonical coordinates to pixel coordinates (pixel centers at integers)."""
    return np.asarray(points) * (resolution / CANONICAL_RES) - 0.5


def pixel_to_canonical(points: np.ndarray, resolution: int) -> np.ndarray:
    return (np.asarray(points) + 0.5) * (CANONICAL_RES / resolution)
