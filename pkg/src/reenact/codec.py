"""Image autoencoder (x8 latent) and a global reference embedder.

Tensors are channels-first: images ``(B, 3, H, W)`` in [0, 1], latents
``(B, c_z, H/8, W/8)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError, NumericError

DOWNSAMPLE = 8


@dataclass
class LatentFrame:
    data: torch.Tensor  # (c_z, h, w)
    source: int | str = "reference"


def check_image(image: torch.Tensor, factor: int = DOWNSAMPLE) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise InvalidArgumentError(f"expected (B, 3, H, W) image batch, got {tuple(image.shape)}")
    H, W = image.shape[-2:]
    if H % factor or W % factor:
        raise InvalidArgumentError(f"image size {H}x{W} is not divisible by {factor}")


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class _Res(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
                                  _norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class Codec(nn.Module):
    """Plain deterministic autoencoder with three stride-2 stages.

    ``scale`` multiplies encoder outputs so diffused latents have roughly unit
    variance; it is fitted after training by :func:`fit_latent_scale`.
    """

    def __init__(self, c_z: int = 4, width: int = 32):
        super().__init__()
        self.c_z = c_z
        w = [width, width * 2, width * 4]
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w[0], 3, padding=1),
            _Res(w[0]),
            nn.Conv2d(w[0], w[0], 4, 2, 1),
            _Res(w[0]),
            nn.Conv2d(w[0], w[1], 4, 2, 1),
            _Res(w[1]),
            nn.Conv2d(w[1], w[2], 4, 2, 1),
            _Res(w[2]),
            _norm(w[2]), nn.SiLU(),
            nn.Conv2d(w[2], c_z, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c_z, w[2], 3, padding=1),
            _Res(w[2]),
            nn.Upsample(scale_factor=2), nn.Conv2d(w[2], w[1], 3, padding=1),
            _Res(w[1]),
            nn.Upsample(scale_factor=2), nn.Conv2d(w[1], w[0], 3, padding=1),
            _Res(w[0]),
            nn.Upsample(scale_factor=2), nn.Conv2d(w[0], w[0], 3, padding=1),
            _Res(w[0]),
            _norm(w[0]), nn.SiLU(),
            nn.Conv2d(w[0], 3, 3, padding=1),
        )
        self.register_buffer("scale", torch.ones(()))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        check_image(image)
        return self.encoder(image * 2 - 1) * self.scale

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(latent).all():
            raise NumericError("latent contains non-finite values")
        return torch.sigmoid(self.decoder(latent / self.scale))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image))


@torch.no_grad()
def fit_latent_scale(codec: Codec, images: torch.Tensor) -> float:
    codec.scale.fill_(1.0)
    z = codec.encode(images)
    s = float(1.0 / z.std().clamp_min(1e-6))
    codec.scale.fill_(s)
    return s


class GlobalEmbedder(nn.Module):
    """Four stride-2 conv stages pooled into ``n_tokens`` tokens of width ``dim``."""

    def __init__(self, dim: int = 64, n_tokens: int = 16, width: int = 16):
        super().__init__()
        if n_tokens < 1:
            raise InvalidArgumentError("n_tokens must be >= 1")
        self.n_tokens = n_tokens
        self.dim = dim
        # factor the token count into the most square grid
        gh = max(d for d in range(1, int(n_tokens**0.5) + 1) if n_tokens % d == 0)
        self.grid = (gh, n_tokens // gh)
        chans = [3, width, width * 2, width * 4, dim]
        layers: list[nn.Module] = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1), nn.SiLU()]
        self.convs = nn.Sequential(*layers[:-1])
        self.proj = nn.Linear(dim, dim)
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        check_image(image, 16)
        h = self.convs(image * 2 - 1)
        h = F.adaptive_avg_pool2d(h, self.grid)
        tokens = h.flatten(2).transpose(1, 2)
        return self.proj(tokens) + self.pos


def vae_encode(codec: Codec, image: torch.Tensor) -> torch.Tensor:
    return codec.encode(image)


def vae_decode(codec: Codec, latent: torch.Tensor) -> torch.Tensor:
    return codec.decode(latent)


def embed_reference(embedder: GlobalEmbedder, image: torch.Tensor) -> torch.Tensor:
    return embedder(image)
