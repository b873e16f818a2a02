"""Motion-feature correspondence and texturally aligned appearance.

Feature maps are flattened to ``(..., hw, c)`` with row-major (y, x) order.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError


def flatten_map(x: torch.Tensor) -> torch.Tensor:
    """``(B, c, h, w)`` -> ``(B, hw, c)``."""
    return x.flatten(2).transpose(1, 2)


def unflatten_map(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """``(B, hw, c)`` -> ``(B, c, h, w)``."""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], *hw)


def correspondence(f_drive: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Scaled similarity ``B = F_i F_r^T / sqrt(c0)`` between flattened features.

    Args:
        f_drive: ``(..., hw, c0)`` driving motion features.
        f_ref: ``(..., hw, c0)`` reference motion features.
    Returns:
        ``(..., hw, hw)``; rows index driving positions, columns reference positions.
    """
    if f_drive.shape != f_ref.shape:
        raise InvalidArgumentError(f"feature shapes differ: {tuple(f_drive.shape)} vs {tuple(f_ref.shape)}")
    return f_drive @ f_ref.transpose(-1, -2) / math.sqrt(f_drive.shape[-1])


def align_appearance(B: torch.Tensor, z_ref: torch.Tensor) -> torch.Tensor:
    """Row-softmax of ``B`` applied to flattened reference latents ``(..., hw, c_z)``."""
    if B.shape[-1] != z_ref.shape[-2]:
        raise InvalidArgumentError(f"B has {B.shape[-1]} columns but z_ref has {z_ref.shape[-2]} rows")
    if not torch.isfinite(B).all():
        raise NumericError("correspondence matrix contains non-finite values")
    return torch.softmax(B, dim=-1) @ z_ref


def _log2_ratio(a: int, b: int) -> int:
    big, small = max(a, b), min(a, b)
    if small < 1 or big % small:
        raise InvalidArgumentError(f"cannot resample between {a} and {b}")
    r = big // small
    if r & (r - 1):
        raise InvalidArgumentError(f"resampling ratio {r} is not a power of two")
    return r


def pool_correspondence(B: torch.Tensor, from_res: tuple[int, int], to_res: tuple[int, int]) -> torch.Tensor:
    """Resample ``B`` on both its query and key grids.

    Downsampling averages ``k x k`` blocks on each grid (a 4D average pool);
    upsampling repeats entries (nearest neighbour).
    """
    h, w = from_res
    h2, w2 = to_res
    if B.shape[-2:] != (h * w, h * w):
        raise InvalidArgumentError(f"B shape {tuple(B.shape[-2:])} does not match grid {from_res}")
    if (h, w) == (h2, w2):
        return B
    ry, rx = _log2_ratio(h, h2), _log2_ratio(w, w2)
    if not ((h2 <= h and w2 <= w) or (h2 >= h and w2 >= w)):
        raise InvalidArgumentError("mixed up/down resampling is not supported")
    lead = B.shape[:-2]
    x = B.reshape(-1, h, w, h * w)

    def resample(t: torch.Tensor) -> torch.Tensor:
        # t: (N, h, w, C) -> resampled over the (h, w) grid
        t = t.permute(0, 3, 1, 2)
        if h2 <= h and w2 <= w:
            t = F.avg_pool2d(t, (ry, rx))
        else:
            t = t.repeat_interleave(ry, dim=2).repeat_interleave(rx, dim=3)
        return t.permute(0, 2, 3, 1)

    x = resample(x)  # query grid
    x = x.reshape(-1, h2 * w2, h, w).permute(0, 2, 3, 1)
    x = resample(x)  # key grid
    x = x.reshape(-1, h2 * w2, h2 * w2).transpose(1, 2)
    return x.reshape(*lead, h2 * w2, h2 * w2)
