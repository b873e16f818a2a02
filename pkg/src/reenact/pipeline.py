"""The full reenactment model and whole-video inference."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .alignment import align_appearance, correspondence, flatten_map, unflatten_map
from .backbone import BackboneConfig, ReferenceCache, TwoBranchUNet
from .codec import Codec, GlobalEmbedder
from .diffusion import DiffusionSchedule, InferencePlan, blend_windows, ddim_sample, window_starts
from .errors import InvalidArgumentError
from .motion_encoder import MotionEncoder


@dataclass
class ModelConfig:
    c_z: int = 4
    codec_width: int = 32
    motion_channels: tuple[int, ...] = (16, 32, 96, 256)
    global_dim: int = 64
    global_tokens: int = 16
    base_channels: int = 64
    channel_mult: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    max_frames: int = 16
    hand_levels: int = 2
    bank_size: int = 512
    mask_mode: str = "max"
    use_alignment: bool = True
    use_hand_att: bool = True

    def __post_init__(self):
        self.motion_channels = tuple(int(c) for c in self.motion_channels)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            c_z=self.c_z, c_motion=self.motion_channels[-1], c_global=self.global_dim,
            base_channels=self.base_channels, channel_mult=self.channel_mult, heads=self.heads,
            max_frames=self.max_frames, hand_levels=self.hand_levels, bank_size=self.bank_size,
            mask_mode=self.mask_mode, use_hand_att=self.use_hand_att,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Conditions:
    """Per-frame driving conditions for ``b*n`` frames."""

    f_drive: torch.Tensor
    z_aligned: torch.Tensor
    B: torch.Tensor | None
    masks: torch.Tensor | None


@dataclass
class ReferenceState:
    z_ref: torch.Tensor
    f_ref: torch.Tensor
    cache: ReferenceCache
    extras: dict = field(default_factory=dict)


class Reenactor(nn.Module):
    """Codec, motion encoder, global embedder and two-branch UNet in one module.

    ``null_latent`` and ``null_tokens`` stand in for the reference when the
    condition is dropped (classifier-free guidance).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.codec = Codec(cfg.c_z, cfg.codec_width)
        self.motion_encoder = MotionEncoder(cfg.motion_channels)
        self.embedder = GlobalEmbedder(cfg.global_dim, cfg.global_tokens)
        self.unet = TwoBranchUNet(cfg.backbone())
        self.null_latent = nn.Parameter(torch.zeros(cfg.c_z))
        self.null_tokens = nn.Parameter(torch.zeros(cfg.global_tokens, cfg.global_dim))

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"codec": [], "motion_encoder": [], "embedder": [], "temporal": [], "spatial": []}
        for name, _ in self.named_parameters():
            head = name.split(".")[0]
            if head in ("codec", "motion_encoder", "embedder"):
                groups[head].append(name)
            elif ".temporal." in name:
                groups["temporal"].append(name)
            else:
                groups["spatial"].append(name)
        return groups

    # ---------------------------------------------------------------- parts
    def reference(self, ref_image: torch.Tensor, ref_guidance: torch.Tensor, z_ref: torch.Tensor | None = None,
                  drop: torch.Tensor | None = None) -> ReferenceState:
        """Encode reference frames ``(b, 3, H, W)`` and build the reference cache.

        ``drop`` (bool per batch entry) swaps the reference for the null embeddings.
        """
        if z_ref is None:
            with torch.no_grad():
                z_ref = self.codec.encode(ref_image)
        f_ref = self.motion_encoder(ref_guidance)
        tokens = self.embedder(ref_image)
        z_in = z_ref
        if drop is not None and drop.any():
            d = drop.view(-1, 1, 1, 1)
            z_in = torch.where(d, self.null_latent.view(1, -1, 1, 1).expand_as(z_ref), z_ref)
            tokens = torch.where(drop.view(-1, 1, 1), self.null_tokens.expand_as(tokens), tokens)
        cache = self.unet.run_reference_branch(z_in, f_ref, tokens)
        return ReferenceState(z_in, f_ref, cache)

    def conditions(self, guidance: torch.Tensor, masks: torch.Tensor | None, ref: ReferenceState, n: int) -> Conditions:
        """Motion features, correspondence and aligned appearance for ``b*n`` driving frames."""
        f_drive = self.motion_encoder(guidance)
        hw = tuple(f_drive.shape[-2:])
        if tuple(ref.f_ref.shape[-2:]) != hw:
            raise InvalidArgumentError("driving and reference grids differ")
        z_ref = ref.z_ref.repeat_interleave(n, dim=0)
        if self.cfg.use_alignment:
            f_ref = ref.f_ref.repeat_interleave(n, dim=0)
            B = correspondence(flatten_map(f_drive), flatten_map(f_ref))
            z_al = unflatten_map(align_appearance(B, flatten_map(z_ref)), hw)
        else:
            B = None
            z_al = z_ref.mean(dim=(2, 3), keepdim=True).expand_as(z_ref)
        if not self.cfg.use_hand_att:
            masks = None
        return Conditions(f_drive, z_al, B, masks)

    def eps(self, z_t: torch.Tensor, t: torch.Tensor, cond: Conditions, ref: ReferenceState, n: int) -> torch.Tensor:
        return self.unet.denoise(z_t, cond.f_drive, cond.z_aligned, cond.B, cond.masks, ref.cache, t, n)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """``(T, H, W, 3)`` float array -> ``(T, 3, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(frames, dtype=np.float32))).permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()


@torch.no_grad()
def infer_video(
    model: Reenactor,
    ref_image: np.ndarray,
    ref_guidance: np.ndarray,
    guidance: np.ndarray,
    hand_masks: np.ndarray | None,
    plan: InferencePlan,
    schedule: DiffusionSchedule | None = None,
    return_windows: bool = False,
):
    """Generate one frame per driving guidance render.

    Args:
        ref_image, ref_guidance: ``(H, W, 3)`` reference frame and its guidance.
        guidance: ``(T', H, W, 3)`` driving renders.
        hand_masks: ``(T', H, W)`` binary masks or None.
    Returns:
        ``(T', H, W, 3)`` frames, plus ``(starts, per-window latents, blended latents)``
        when ``return_windows``.
    """
    schedule = schedule or DiffusionSchedule()
    T = len(guidance)
    if T < 1:
        raise InvalidArgumentError("need at least one driving frame")
    model.eval()
    ref = model.reference(frames_to_tensor(ref_image[None]), frames_to_tensor(ref_guidance[None]))
    null_ref = None
    if plan.guidance_scale != 1.0:
        null_ref = model.reference(frames_to_tensor(ref_image[None]), frames_to_tensor(ref_guidance[None]),
                                   drop=torch.ones(1, dtype=torch.bool))
    g_all = frames_to_tensor(guidance)
    m_all = None if hand_masks is None else torch.from_numpy(np.asarray(hand_masks, dtype=np.float32))
    hw = tuple(ref.z_ref.shape[-2:])
    gen = torch.Generator().manual_seed(plan.seed)
    noise = torch.randn((T, model.cfg.c_z) + hw, generator=gen)
    starts = window_starts(T, plan.window, plan.stride)
    win = min(plan.window, T)
    outs = []
    for s in starts:
        sl = slice(s, s + win)
        try:
            cond = model.conditions(g_all[sl], None if m_all is None else m_all[sl], ref, win)
        except InvalidArgumentError as exc:
            raise InvalidArgumentError(f"frames {s}..{s + win - 1}: {exc}") from exc

        def eps_fn(x, t, cond=cond):
            e = model.eps(x, t[:1], cond, ref, win)
            if null_ref is not None:
                null_cond = model.conditions(g_all[sl], None if m_all is None else m_all[sl], null_ref, win)
                null_cond.B = None
                e0 = model.eps(x, t[:1], null_cond, null_ref, win)
                e = e0 + plan.guidance_scale * (e - e0)
            return e

        outs.append(ddim_sample(eps_fn, noise[sl], schedule, plan))
    z = blend_windows(outs, starts, T)
    frames = tensor_to_frames(model.codec.decode(z))
    if return_windows:
        return frames, (starts, outs, z)
    return frames
