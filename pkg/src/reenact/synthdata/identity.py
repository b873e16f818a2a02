"""Avatar identities: appearance palette, appearance-only proportions, face shape."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

# Canonical drawing space is CANONICAL_RES x CANONICAL_RES; renders rescale from it.
CANONICAL_RES = 256
REF_SHOULDER_WIDTH = 84.0

PALETTE_PARTS = ("background", "shirt", "sleeve", "skin", "mouth", "eyes")

# Saturated marker colors are reserved for landmark markers; palette colors keep
# at least this RGB distance from all of them.
MARKER_COLOR_MARGIN = 0.55


@dataclass(frozen=True)
class IdentityParams:
    identity_id: str
    proportions: dict[str, float]
    palette: dict[str, tuple[float, float, float]]
    texture_seed: int
    shoulder_width: float
    face_shape_coeffs: np.ndarray = field(repr=False)
    anchor: tuple[float, float] = (128.0, 120.0)

    def __post_init__(self):
        if any(v <= 0 for v in self.proportions.values()):
            raise ValueError("proportions must be strictly positive")
        if self.shoulder_width <= 0:
            raise ValueError("shoulder_width must be positive")

    def __eq__(self, other):
        if not isinstance(other, IdentityParams):
            return NotImplemented
        return (
            self.identity_id == other.identity_id
            and self.proportions == other.proportions
            and self.palette == other.palette
            and self.texture_seed == other.texture_seed
            and self.shoulder_width == other.shoulder_width
            and np.array_equal(self.face_shape_coeffs, other.face_shape_coeffs)
            and self.anchor == other.anchor
        )

    def __hash__(self):
        return hash((self.identity_id, self.texture_seed))

    def to_dict(self) -> dict:
        return {
            "identity_id": self.identity_id,
            "proportions": dict(self.proportions),
            "palette": {k: list(v) for k, v in self.palette.items()},
            "texture_seed": self.texture_seed,
            "shoulder_width": self.shoulder_width,
            "face_shape_coeffs": self.face_shape_coeffs.tolist(),
            "anchor": list(self.anchor),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityParams":
        return cls(
            identity_id=d["identity_id"],
            proportions={k: float(v) for k, v in d["proportions"].items()},
            palette={k: tuple(float(c) for c in v) for k, v in d["palette"].items()},
            texture_seed=int(d["texture_seed"]),
            shoulder_width=float(d["shoulder_width"]),
            face_shape_coeffs=np.asarray(d["face_shape_coeffs"], dtype=np.float64),
            anchor=tuple(float(a) for a in d["anchor"]),
        )


def marker_colors(count: int) -> np.ndarray:
    """Fully saturated, evenly spaced hues used for the joint markers."""
    return np.array(
        [colorsys.hsv_to_rgb(i / count, 1.0, 1.0) for i in range(count)], dtype=np.float64
    )


def _sample_color(rng, sat_range, val_range, forbidden) -> tuple[float, float, float]:
    while True:
        rgb = np.array(
            colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(*sat_range), rng.uniform(*val_range))
        )
        if np.min(np.linalg.norm(forbidden - rgb, axis=1)) >= MARKER_COLOR_MARGIN:
            return tuple(float(c) for c in rgb)


def sample_identity(seed: int) -> IdentityParams:
    """Draw an identity deterministically from ``seed``."""
    from .scene import MARKERS  # local import: scene depends on this module

    rng = np.random.default_rng([seed, 0x1D])
    forbidden = marker_colors(len(MARKERS))
    palette = {
        "background": _sample_color(rng, (0.0, 0.25), (0.35, 0.8), forbidden),
        "shirt": _sample_color(rng, (0.05, 0.3), (0.3, 0.75), forbidden),
        "sleeve": _sample_color(rng, (0.05, 0.3), (0.3, 0.75), forbidden),
        "skin": _sample_color(rng, (0.15, 0.3), (0.55, 0.8), forbidden),
        "mouth": (0.35, 0.08, 0.1),
        "eyes": (0.08, 0.08, 0.1),
    }
    proportions = {
        "limb_thickness": float(rng.uniform(0.85, 1.2)),
        "torso_taper": float(rng.uniform(0.75, 1.05)),
        "torso_length": float(rng.uniform(2.2, 2.8)),
        "neck_width": float(rng.uniform(0.16, 0.24)),
    }
    return IdentityParams(
        identity_id=f"id{seed:04d}",
        proportions=proportions,
        palette=palette,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        shoulder_width=float(rng.uniform(0.88, 1.08) * REF_SHOULDER_WIDTH),
        face_shape_coeffs=rng.uniform(-1.0, 1.0, size=4),
        anchor=(float(128.0 + rng.uniform(-8, 8)), float(124.0 + rng.uniform(-5, 5))),
    )
