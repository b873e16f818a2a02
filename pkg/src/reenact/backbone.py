"""Two-branch UNet: a reference branch over the clean reference frame and a
denoising branch over noisy latent windows.

Every denoising block runs, in order: residual conv (timestep-modulated),
self-attention, reference attention biased by the pooled correspondence,
cross-attention to the global reference tokens, hand attention (highest
resolutions only) and temporal attention. Reference-branch blocks have the
same layout minus timestep modulation, reference, hand and temporal attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .alignment import pool_correspondence
from .attn import BANK_SIZE, Attention, HandAttention, TemporalAttention, downsample_mask
from .errors import InvalidArgumentError


@dataclass
class BackboneConfig:
    c_z: int = 4
    c_motion: int = 256
    c_global: int = 64
    base_channels: int = 64
    channel_mult: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    max_frames: int = 16
    hand_levels: int = 2
    bank_size: int = BANK_SIZE
    mask_mode: str = "max"
    use_hand_att: bool = True
    use_temporal: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.levels < 2:
            raise InvalidArgumentError("backbone needs at least 2 levels")
        if self.max_frames < 1:
            raise InvalidArgumentError("max_frames must be >= 1")
        for m in self.channel_mult:
            if (self.base_channels * m) % self.heads:
                raise InvalidArgumentError("every level width must be divisible by heads")

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(torch.get_default_dtype())


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None):
        super().__init__()
        self.norm1 = _gn(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(temb_dim, 2 * cout) if temb_dim else None
        self.norm2 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.film is not None:
            scale, shift = self.film(F.silu(temb)).chunk(2, dim=1)
            h = h * (1 + scale[..., None, None]) + shift[..., None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Block(nn.Module):
    """One UNet stage. ``denoise=False`` builds the reference-branch twin."""

    def __init__(self, cin: int, cout: int, cfg: BackboneConfig, denoise: bool, hand: bool, temb_dim: int | None):
        super().__init__()
        self.denoise = denoise
        self.res = ResBlock(cin, cout, temb_dim if denoise else None)
        self.norm_self = nn.LayerNorm(cout)
        self.self_attn = Attention(cout, heads=cfg.heads)
        if denoise:
            self.norm_ref = nn.LayerNorm(cout)
            self.ref_attn = Attention(cout, heads=cfg.heads)
        self.norm_glob = nn.LayerNorm(cout)
        self.glob_attn = Attention(cout, cfg.c_global, heads=cfg.heads)
        self.hand_attn = HandAttention(cout, cfg.bank_size) if denoise and hand else None
        self.temporal = TemporalAttention(cout, cfg.max_frames, cfg.heads) if denoise and cfg.use_temporal else None

    def forward(self, x, tokens, temb=None, ref_kv=None, bias=None, mask=None, n=1, capture=None):
        x = self.res(x, temb)
        b, c, h, w = x.shape
        s = x.flatten(2).transpose(1, 2)
        normed = self.norm_self(s)
        if capture is not None:
            capture.append(normed)
        s = s + self.self_attn(normed)
        if self.denoise:
            s = s + self.ref_attn(self.norm_ref(s), kv=ref_kv, bias=bias)
        s = s + self.glob_attn(self.norm_glob(s), context=tokens)
        if self.hand_attn is not None and mask is not None:
            s = self.hand_attn(s, mask)
        if self.temporal is not None:
            s = self.temporal(s.reshape(b // n, n, h, w, c)).reshape(b, h * w, c)
        return s.transpose(1, 2).reshape(b, c, h, w)


class Branch(nn.Module):
    def __init__(self, cfg: BackboneConfig, denoise: bool):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        base = cfg.base_channels
        temb_dim = 4 * base if denoise else None
        in_ch = cfg.c_motion + 2 * cfg.c_z if denoise else cfg.c_motion + cfg.c_z
        self.stem = nn.Conv2d(in_ch, base, 1)
        if denoise:
            self.time_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        hand = lambda lvl: cfg.use_hand_att and lvl < cfg.hand_levels  # noqa: E731
        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        ch = base
        for lvl, wd in enumerate(widths):
            self.down.append(Block(ch, wd, cfg, denoise, hand(lvl), temb_dim))
            ch = wd
            if lvl < cfg.levels - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, 2, 1))
        self.mid = Block(ch, ch, cfg, denoise, False, temb_dim)
        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            wd = widths[lvl]
            self.up.append(Block(ch + wd, wd, cfg, denoise, hand(lvl), temb_dim))
            ch = wd
            if lvl > 0:
                self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))
        if denoise:
            self.out_norm = _gn(ch)
            self.out = nn.Conv2d(ch, cfg.c_z, 3, padding=1)
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def site_levels(self) -> list[int]:
        """Resolution level of each block in execution order."""
        L = self.cfg.levels
        return list(range(L)) + [L - 1] + list(reversed(range(L)))

    def blocks(self) -> list[Block]:
        return list(self.down) + [self.mid] + list(self.up)


@dataclass
class ReferenceCache:
    """Keys/values for every reference-attention site plus the global tokens."""

    kv: list[tuple[torch.Tensor, torch.Tensor]]
    tokens: torch.Tensor
    sizes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.kv)

    def repeat(self, n: int) -> "ReferenceCache":
        """Repeat each batch entry ``n`` times (one per window frame)."""
        if n == 1:
            return self
        rep = lambda t: t.repeat_interleave(n, dim=0)  # noqa: E731
        return ReferenceCache([(rep(k), rep(v)) for k, v in self.kv], rep(self.tokens), self.sizes)


class TwoBranchUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.reference = Branch(cfg, denoise=False)
        self.denoiser = Branch(cfg, denoise=True)

    # ------------------------------------------------------------ reference
    def run_reference_branch(self, z_ref: torch.Tensor, f_ref: torch.Tensor, tokens: torch.Tensor) -> ReferenceCache:
        """Clean reference latents ``(B, c_z, h, w)`` and motion ``(B, c0, h, w)`` -> cache."""
        if z_ref.shape[-2:] != f_ref.shape[-2:] or z_ref.shape[0] != f_ref.shape[0]:
            raise InvalidArgumentError(f"reference latent {tuple(z_ref.shape)} and motion {tuple(f_ref.shape)} disagree")
        br = self.reference
        captured: list[torch.Tensor] = []
        sizes: list[tuple[int, int]] = []
        x = br.stem(torch.cat([z_ref, f_ref], dim=1))

        def run(block, x):
            sizes.append(tuple(x.shape[-2:]))
            return block(x, tokens, capture=captured)

        skips = []
        for lvl, block in enumerate(br.down):
            x = run(block, x)
            skips.append(x)
            if lvl < len(br.downsamplers):
                x = br.downsamplers[lvl](x)
        x = run(br.mid, x)
        for i, block in enumerate(br.up):
            x = run(block, torch.cat([x, skips.pop()], dim=1))
            if i < len(br.upsamplers):
                x = br.upsamplers[i](F.interpolate(x, scale_factor=2, mode="nearest"))
        kv = [blk.ref_attn.project_kv(feat) for blk, feat in zip(self.denoiser.blocks(), captured)]
        return ReferenceCache(kv, tokens, sizes)

    # ------------------------------------------------------------ denoising
    def denoise(
        self,
        z_noisy: torch.Tensor,
        f_drive: torch.Tensor,
        z_aligned: torch.Tensor,
        B: torch.Tensor | None,
        masks: torch.Tensor | None,
        cache: ReferenceCache,
        t: torch.Tensor,
        n: int = 1,
    ) -> torch.Tensor:
        """Predict noise for a batch of windows.

        Args:
            z_noisy, z_aligned: ``(b*n, c_z, h, w)`` with frames of a window adjacent.
            f_drive: ``(b*n, c0, h, w)``.
            B: ``(b*n, hw, hw)`` latent-resolution correspondence or None for no bias.
            masks: ``(b*n, H, W)`` image-resolution hand masks or None.
            cache: reference cache for the ``b`` windows.
            t: ``(b,)`` integer timesteps.
        """
        bn = z_noisy.shape[0]
        if bn % n or f_drive.shape[0] != bn or z_aligned.shape[0] != bn:
            raise InvalidArgumentError("denoising inputs must share a batch of b*n frames")
        if B is not None and B.shape[0] != bn:
            raise InvalidArgumentError("one correspondence matrix per frame required")
        if masks is not None and masks.shape[0] != bn:
            raise InvalidArgumentError("one hand mask per frame required")
        if t.shape[0] * n != bn or len(cache.tokens) * n != bn:
            raise InvalidArgumentError("timesteps / cache batch do not match b")
        br = self.denoiser
        cache = cache.repeat(n)
        temb = br.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(z_noisy.dtype)).repeat_interleave(n, dim=0)
        hw0 = tuple(z_noisy.shape[-2:])
        biases: dict[tuple[int, int], torch.Tensor | None] = {}
        hmasks: dict[tuple[int, int], torch.Tensor | None] = {}

        def bias_at(size):
            if B is None:
                return None
            if size not in biases:
                biases[size] = pool_correspondence(B, hw0, size)
            return biases[size]

        def mask_at(size):
            if masks is None:
                return None
            if size not in hmasks:
                hmasks[size] = downsample_mask(masks, size, self.cfg.mask_mode).flatten(1)
            return hmasks[size]

        site = iter(range(len(cache)))

        def run(block, x):
            i = next(site)
            size = tuple(x.shape[-2:])
            return block(x, cache.tokens, temb, cache.kv[i], bias_at(size), mask_at(size), n)

        x = br.stem(torch.cat([f_drive, z_aligned, z_noisy], dim=1))
        skips = []
        for lvl, block in enumerate(br.down):
            x = run(block, x)
            skips.append(x)
            if lvl < len(br.downsamplers):
                x = br.downsamplers[lvl](x)
        x = run(br.mid, x)
        for i, block in enumerate(br.up):
            x = run(block, torch.cat([x, skips.pop()], dim=1))
            if i < len(br.upsamplers):
                x = br.upsamplers[i](F.interpolate(x, scale_factor=2, mode="nearest"))
        return br.out(F.silu(br.out_norm(x)))

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names split into the temporal group and everything else."""
        groups: dict[str, list[str]] = {"temporal": [], "spatial": []}
        for name, _ in self.named_parameters():
            groups["temporal" if ".temporal." in name else "spatial"].append(name)
        return groups

    def summary(self) -> str:
        lines = []
        for label, br in (("reference", self.reference), ("denoising", self.denoiser)):
            for lvl, blk in zip(br.site_levels(), br.blocks()):
                parts = ["res", "self"] + (["ref"] if blk.denoise else []) + ["glob"]
                parts += ["hand"] if blk.hand_attn is not None else []
                parts += ["temporal"] if blk.temporal is not None else []
                lines.append(f"{label:<10} level {lvl} width {blk.res.conv2.out_channels:>4}: {' > '.join(parts)}")
        return "\n".join(lines)
