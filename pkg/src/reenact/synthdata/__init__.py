"""Procedural avatar videos with exact guidance, keypoints, hand masks and flow."""

from .align import align_driving_signal
from .dataset import read_clip, read_dataset, read_flow, read_manifest, write_dataset, write_flow
from .generate import generate_clips
from .identity import IdentityParams, sample_identity
from .motion import JOINT_LIMITS, PoseState, rest_pose, sample_motion
from .render import (
    SUPPORTED_RESOLUTIONS,
    ClipSample,
    Keypoints,
    MotionGuidance,
    hand_mask_from_guidance,
    render_clip,
    render_guidance,
)
from .scene import KEYPOINT_GROUPS, KEYPOINT_NAMES, MARKERS

__all__ = [
    "align_driving_signal",
    "read_clip",
    "read_dataset",
    "read_flow",
    "read_manifest",
    "write_dataset",
    "write_flow",
    "generate_clips",
    "IdentityParams",
    "sample_identity",
    "JOINT_LIMITS",
    "PoseState",
    "rest_pose",
    "sample_motion",
    "SUPPORTED_RESOLUTIONS",
    "ClipSample",
    "Keypoints",
    "MotionGuidance",
    "hand_mask_from_guidance",
    "render_clip",
    "render_guidance",
    "KEYPOINT_GROUPS",
    "KEYPOINT_NAMES",
    "MARKERS",
]
