"""Attention operators: biased reference attention, hand-bank attention,
per-location temporal attention, and the plain self/cross attention they build on.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError

BANK_SIZE = 512
BANK_INIT_STD = 0.02


def reference_att(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(c) + bias) v`` over the trailing two dims.

    ``bias`` is ``(..., n_q, n_k)`` and broadcasts over any extra leading dims
    of ``q`` (e.g. heads).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InvalidArgumentError(f"incompatible q/k/v shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        if bias.shape[-2:] != logits.shape[-2:]:
            raise InvalidArgumentError(f"bias shape {tuple(bias.shape)} does not match logits {tuple(logits.shape)}")
        logits = logits + bias
    return torch.softmax(logits, dim=-1) @ v


def hand_att(q: torch.Tensor, bank: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``mask * softmax(q H^T / sqrt(c)) H`` with the bank as both keys and values.

    Args:
        q: ``(..., hw, c)``.
        bank: ``(N_b, c)``.
        mask: ``(..., hw)`` with values in {0, 1}.
    """
    if mask.shape != q.shape[:-1]:
        raise InvalidArgumentError(f"mask shape {tuple(mask.shape)} does not match queries {tuple(q.shape[:-1])}")
    if bank.shape[-1] != q.shape[-1]:
        raise InvalidArgumentError("bank width differs from query width")
    w = torch.softmax(q @ bank.t() / math.sqrt(q.shape[-1]), dim=-1)
    return mask.unsqueeze(-1).to(q.dtype) * (w @ bank)


def temporal_att(a: torch.Tensor, w_q, w_k, w_v, w_o, heads: int = 1) -> torch.Tensor:
    """Residual self-attention across frames at each spatial location.

    ``a`` is ``(b, n, h, w, c)``; the ``w_*`` are ``(c, c)`` matrices applied
    as ``x @ w``.
    """
    if a.dim() != 5:
        raise InvalidArgumentError(f"expected (b, n, h, w, c), got {tuple(a.shape)}")
    b, n, h, w, c = a.shape
    x = a.permute(0, 2, 3, 1, 4).reshape(b * h * w, n, c)
    out = _multihead(x @ w_q, x @ w_k, x @ w_v, heads) @ w_o
    out = out.reshape(b, h, w, n, c).permute(0, 3, 1, 2, 4)
    return a + out


def _split(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).transpose(-2, -3)


def _merge(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, n, d = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, heads * d)


def _multihead(q, k, v, heads: int, bias=None) -> torch.Tensor:
    if bias is not None:
        bias = bias.unsqueeze(-3)  # same bias for every head
    return _merge(reference_att(_split(q, heads), _split(k, heads), _split(v, heads), bias))


class Attention(nn.Module):
    """Multi-head attention with optional additive logit bias and precomputed keys/values."""

    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise InvalidArgumentError(f"dim {dim} not divisible by heads {heads}")
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def project_kv(self, context: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.to_k(context), self.to_v(context)

    def forward(self, x, context=None, bias=None, kv=None):
        if kv is None:
            kv = self.project_kv(x if context is None else context)
        k, v = kv
        return self.to_out(_multihead(self.to_q(x), k, v, self.heads, bias))


class HandAttention(nn.Module):
    """Masked attention into a learnable hand feature bank, added as a residual.

    The output projection has no bias, so an all-zero mask leaves the input
    untouched exactly.
    """

    def __init__(self, dim: int, bank_size: int = BANK_SIZE):
        super().__init__()
        if bank_size < 1:
            raise InvalidArgumentError("bank_size must be >= 1")
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.bank = nn.Parameter(torch.randn(bank_size, dim) * BANK_INIT_STD)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return x + self.to_out(hand_att(self.to_q(self.norm(x)), self.bank, mask))


class TemporalAttention(nn.Module):
    """Self-attention over the frames of a window at each spatial position.

    A learned per-frame-index embedding is added before the projections; the
    output projection starts at zero so a fresh module is an identity map.
    """

    def __init__(self, dim: int, max_frames: int = 16, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise InvalidArgumentError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.max_frames = max_frames
        self.norm = nn.LayerNorm(dim)
        self.pos = nn.Parameter(torch.randn(max_frames, dim) * 0.02)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        nn.init.zeros_(self.to_out.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(b, n, h, w, c)``."""
        n = x.shape[1]
        if n > self.max_frames:
            raise InvalidArgumentError(f"window of {n} frames exceeds max_frames={self.max_frames}")
        h = self.norm(x) + self.pos[:n].view(1, n, 1, 1, -1)
        b, _, hh, ww, c = x.shape
        h = h.permute(0, 2, 3, 1, 4).reshape(b * hh * ww, n, c)
        out = _multihead(self.to_q(h), self.to_k(h), self.to_v(h), self.heads)
        out = self.to_out(out).reshape(b, hh, ww, n, c).permute(0, 3, 1, 2, 4)
        return x + out


def downsample_mask(mask: torch.Tensor, size: tuple[int, int], mode: str = "max") -> torch.Tensor:
    """Binary mask ``(B, H, W)`` -> ``(B, h, w)``.

    ``"max"`` marks a cell when any covered pixel is set; ``"nearest"`` samples one pixel.
    """
    m = mask.float().unsqueeze(1)
    if mode == "max":
        m = F.adaptive_max_pool2d(m, size)
    elif mode == "nearest":
        m = F.interpolate(m, size=size, mode="nearest")
    else:
        raise InvalidArgumentError(f"unknown mask mode {mode!r}")
    return m.squeeze(1)
