"""Retargeting a driving signal onto a target identity."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError
from .render import Keypoints
from .scene import KEYPOINT_INDEX

_L, _R = KEYPOINT_INDEX["l_shoulder"], KEYPOINT_INDEX["r_shoulder"]


def shoulder_transform(source: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Uniform scale and the two shoulder midpoints mapping ``source`` shoulders onto ``target``'s."""
    src_len = float(np.hypot(*(source[_R] - source[_L])))
    tgt_len = float(np.hypot(*(target[_R] - target[_L])))
    if src_len <= 1e-12 or tgt_len <= 1e-12:
        raise DegenerateInputError("zero-length shoulder segment")
    return tgt_len / src_len, 0.5 * (source[_L] + source[_R]), 0.5 * (target[_L] + target[_R])


def align_driving_signal(
    driving_kps,
    target_ref_kps,
    driving_face_coeffs: np.ndarray,
    target_face_coeffs: np.ndarray,
    anchor_kps=None,
):
    """Align driving keypoints to a target by shoulder length and position.

    The similarity (uniform scale + translation) maps the shoulders of
    ``anchor_kps`` (default: ``driving_kps`` itself) onto the shoulders of
    ``target_ref_kps`` and is applied to every driving keypoint. Pass the
    driving reference frame as ``anchor_kps`` to retarget a whole sequence
    (``driving_kps`` of shape ``(T, K, 2)``) with a single transform.

    The face shape coefficients are substituted by the target's.

    Returns:
        (aligned keypoints, face coefficients) where the keypoints keep the
        input type (``Keypoints`` or array).
    """
    del driving_face_coeffs  # replaced by the target identity's coefficients
    as_obj = isinstance(driving_kps, Keypoints)
    drv = driving_kps.xy if as_obj else np.asarray(driving_kps, dtype=np.float64)
    tgt = target_ref_kps.xy if isinstance(target_ref_kps, Keypoints) else np.asarray(target_ref_kps, np.float64)
    if anchor_kps is None:
        if drv.ndim != 2:
            raise DegenerateInputError("sequence input requires anchor_kps")
        anchor = drv
    else:
        anchor = anchor_kps.xy if isinstance(anchor_kps, Keypoints) else np.asarray(anchor_kps, np.float64)
    scale, src_mid, tgt_mid = shoulder_transform(anchor, tgt)
    aligned = (drv - src_mid) * scale + tgt_mid
    face = np.array(target_face_coeffs, dtype=np.float64, copy=True)
    if as_obj:
        return Keypoints(aligned, driving_kps.occluded.copy()), face
    return aligned, face
