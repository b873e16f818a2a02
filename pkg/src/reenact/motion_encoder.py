"""Convolutional encoder mapping a guidance render to a latent-aligned feature map."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError

DEFAULT_CHANNELS = (16, 32, 96, 256)
DEFAULT_STRIDES = (2, 2, 2, 1)
KERNEL = 4


class MotionEncoder(nn.Module):
    """Four kernel-4 convolutions with SiLU in between.

    The last layer keeps its resolution, so the total downsample is x8 and the
    output grid matches the codec latent. Kernel-4 stride-1 convs need
    asymmetric padding (1 before, 2 after) to preserve size.
    """

    def __init__(self, channels: Sequence[int] = DEFAULT_CHANNELS, strides: Sequence[int] = DEFAULT_STRIDES):
        super().__init__()
        if len(channels) != len(strides):
            raise InvalidArgumentError("channels and strides must have equal length")
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        self.factor = 1
        for s in strides:
            self.factor *= s
        ins = (3,) + self.channels[:-1]
        self.convs = nn.ModuleList(nn.Conv2d(i, o, KERNEL, s) for i, o, s in zip(ins, self.channels, self.strides))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # He init keeps feature scale O(1) through the stack. The default conv
        # init shrinks it ~4x per layer, which leaves the bilinear
        # correspondence near zero and its softmax uniform from the start.
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu" if i < last else "linear")
            nn.init.zeros_(conv.bias)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def forward(self, guidance: torch.Tensor) -> torch.Tensor:
        if guidance.dim() != 4 or guidance.shape[1] != 3:
            raise InvalidArgumentError(f"expected (B, 3, H, W) guidance, got {tuple(guidance.shape)}")
        H, W = guidance.shape[-2:]
        if H % self.factor or W % self.factor:
            raise InvalidArgumentError(f"guidance size {H}x{W} not divisible by {self.factor}")
        x = guidance * 2 - 1
        for i, (conv, s) in enumerate(zip(self.convs, self.strides)):
            x = F.pad(x, (1, 1, 1, 1) if s == 2 else (1, 2, 1, 2))
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.silu(x)
        return x


def encode_motion(encoder: MotionEncoder, guidance: torch.Tensor, latent_hw: tuple[int, int] | None = None) -> torch.Tensor:
    """Encode guidance renders; optionally assert the output grid equals ``latent_hw``."""
    out = encoder(guidance)
    if latent_hw is not None and tuple(out.shape[-2:]) != tuple(latent_hw):
        raise InvalidArgumentError(f"motion feature grid {tuple(out.shape[-2:])} does not match latent {latent_hw}")
    return out


def encode_motion_batch(encoder: MotionEncoder, guidances: Sequence[torch.Tensor] | torch.Tensor) -> list[torch.Tensor]:
    """Element-wise encoding of T renders ``(3, H, W)``; T = 0 gives an empty list."""
    if len(guidances) == 0:
        return []
    stack = torch.stack(list(guidances)) if not torch.is_tensor(guidances) else guidances
    return list(encoder(stack).unbind(0))
