"""Batch generation of synthetic clips."""

from __future__ import annotations

from .identity import IdentityParams, sample_identity
from .motion import sample_motion
from .render import ClipSample, render_clip


def identity_seeds(count: int, seed: int) -> list[int]:
    return [seed * 1000 + i for i in range(count)]


def generate_clips(
    identities: list[IdentityParams] | int,
    clips_per_identity: int,
    frames: int,
    resolution: int,
    seed: int = 0,
    fps: float = 25.0,
) -> list[ClipSample]:
    """Render ``clips_per_identity`` clips of ``frames`` frames for each identity.

    Motion seeds depend on ``seed``, the identity and the clip index, so the
    same identity gets different motion in different calls with different seeds.
    """
    if isinstance(identities, int):
        identities = [sample_identity(s) for s in identity_seeds(identities, seed)]
    clips = []
    for i, ident in enumerate(identities):
        for c in range(clips_per_identity):
            motion_seed = (seed * 7919 + ident.texture_seed % 100003) * 131 + c
            poses = sample_motion(motion_seed, frames, fps)
            clips.append(render_clip(ident, poses, resolution, clip_id=f"clip{seed:03d}_{c:04d}"))
    return clips
