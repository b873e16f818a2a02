"""Smooth procedural motion: per-joint sums of sinusoids under velocity caps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# name -> (low, high, max velocity per second)
JOINT_LIMITS: dict[str, tuple[float, float, float]] = {
    "torso_lean": (-0.12, 0.12, 0.4),
    "neck_tilt": (-0.25, 0.25, 1.0),
    "l_shoulder": (0.1, 1.1, 2.0),
    "r_shoulder": (0.1, 1.1, 2.0),
    "l_elbow": (0.5, 2.4, 3.0),
    "r_elbow": (0.5, 2.4, 3.0),
    "l_wrist": (-0.5, 0.5, 3.0),
    "r_wrist": (-0.5, 0.5, 3.0),
    "l_thumb": (0.0, 0.8, 4.0),
    "r_thumb": (0.0, 0.8, 4.0),
    "l_fingers": (0.0, 1.0, 4.0),
    "r_fingers": (0.0, 1.0, 4.0),
}
JOINT_NAMES = tuple(JOINT_LIMITS)

# Root displacement in canonical pixels of a reference-sized body.
ROOT_LIMITS = ((-14.0, 14.0, 30.0), (-5.0, 5.0, 12.0))
MOUTH_LIMITS = (0.0, 1.0, 6.0)
EYE_LIMITS = (0.2, 1.0, 6.0)

FREQ_RANGE_HZ = (0.1, 1.0)


@dataclass(frozen=True)
class PoseState:
    joint_angles: dict[str, float]
    root_position: tuple[float, float] = (0.0, 0.0)
    mouth_open: float = 0.3
    eye_state: float = 1.0

    def __post_init__(self):
        for name, (lo, hi, _) in JOINT_LIMITS.items():
            a = self.joint_angles[name]
            if not lo - 1e-9 <= a <= hi + 1e-9:
                raise ValueError(f"joint {name}={a:.4f} outside [{lo}, {hi}]")
        if not 0.0 <= self.mouth_open <= 1.0 or not 0.0 <= self.eye_state <= 1.0:
            raise ValueError("mouth_open and eye_state must lie in [0, 1]")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.joint_angles[n] for n in JOINT_NAMES]
            + [*self.root_position, self.mouth_open, self.eye_state]
        )

    def to_dict(self) -> dict:
        return {
            "joint_angles": dict(self.joint_angles),
            "root_position": list(self.root_position),
            "mouth_open": self.mouth_open,
            "eye_state": self.eye_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseState":
        return cls(
            joint_angles={k: float(v) for k, v in d["joint_angles"].items()},
            root_position=tuple(float(v) for v in d["root_position"]),
            mouth_open=float(d["mouth_open"]),
            eye_state=float(d["eye_state"]),
        )


def rest_pose() -> PoseState:
    """Mid-range pose, used for static clips and references."""
    angles = {n: 0.5 * (lo + hi) for n, (lo, hi, _) in JOINT_LIMITS.items()}
    return PoseState(joint_angles=angles)


def _trajectory(rng, times: np.ndarray, lo: float, hi: float, vmax: float) -> np.ndarray:
    k = int(rng.integers(2, 5))
    omega = 2 * np.pi * rng.uniform(*FREQ_RANGE_HZ, size=k)
    phase = rng.uniform(0, 2 * np.pi, size=k)
    amp = rng.dirichlet(np.ones(k)) * 0.5 * (hi - lo) * rng.uniform(0.6, 1.0)
    # |d/dt| <= sum(amp * omega); rescale to respect the velocity cap.
    speed = float(np.sum(amp * omega))
    if speed > vmax:
        amp *= vmax / speed
    center = 0.5 * (lo + hi)
    return center + np.sum(amp[:, None] * np.sin(omega[:, None] * times[None, :] + phase[:, None]), axis=0)


def sample_motion(seed: int, T: int, fps: float = 25.0) -> list[PoseState]:
    """Sample ``T`` poses at ``fps`` from a seeded smooth trajectory.

    Every channel is ``center + sum_k a_k sin(w_k t + p_k)`` with
    ``sum_k a_k <= half range`` (limits hold without clipping) and
    ``sum_k a_k w_k <= vmax`` (so per-frame change is at most ``vmax / fps``).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    rng = np.random.default_rng([seed, 0x3A])
    times = np.arange(T) / fps
    joints = {n: _trajectory(rng, times, lo, hi, v) for n, (lo, hi, v) in JOINT_LIMITS.items()}
    root = [_trajectory(rng, times, *lim) for lim in ROOT_LIMITS]
    mouth = _trajectory(rng, times, *MOUTH_LIMITS)
    eyes = _trajectory(rng, times, *EYE_LIMITS)
    return [
        PoseState(
            joint_angles={n: float(joints[n][t]) for n in JOINT_NAMES},
            root_position=(float(root[0][t]), float(root[1][t])),
            mouth_open=float(mouth[t]),
            eye_state=float(eyes[t]),
        )
        for t in range(T)
    ]


def velocity_limits(fps: float = 25.0) -> np.ndarray:
    """Per-frame change bound for each entry of :meth:`PoseState.as_vector`."""
    caps = [v for (_, _, v) in JOINT_LIMITS.values()]
    caps += [ROOT_LIMITS[0][2], ROOT_LIMITS[1][2], MOUTH_LIMITS[2], EYE_LIMITS[2]]
    return np.array(caps) / fps
