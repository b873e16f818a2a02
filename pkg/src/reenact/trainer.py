"""Codec pretraining, two-stage diffusion training and few-shot finetuning."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from .codec import fit_latent_scale
from .config import TrainConfig
from .diffusion import DiffusionSchedule, q_sample
from .errors import ConfigValidationError, InvalidArgumentError
from .pipeline import ModelConfig, Reenactor, frames_to_tensor
from .synthdata import ClipSample, read_dataset

TRAINABLE = {
    "codec": ("codec",),
    "1": ("motion_encoder", "embedder", "spatial"),
    "2": ("temporal",),
    "finetune": ("motion_encoder", "embedder", "spatial", "temporal"),
}


@dataclass
class ClipTensors:
    clip_id: str
    identity_id: str
    frames: torch.Tensor  # (T, 3, H, W)
    guidance: torch.Tensor  # (T, 3, H, W)
    masks: torch.Tensor  # (T, H, W)
    latents: torch.Tensor | None = None  # (T, c_z, h, w)


def clip_tensors(clip: ClipSample) -> ClipTensors:
    return ClipTensors(
        clip.clip_id,
        clip.identity.identity_id,
        frames_to_tensor(clip.frames),
        frames_to_tensor(np.stack([g.render for g in clip.guidance])),
        torch.from_numpy(np.stack([g.hand_mask for g in clip.guidance]).astype(np.float32)),
    )


def limit_frames(clips: list[ClipTensors], max_frames: int | None) -> list[ClipTensors]:
    """Keep clips in order, truncating so the total frame count is at most ``max_frames``."""
    if max_frames is None:
        return clips
    out, left = [], max_frames
    for c in clips:
        if left <= 0:
            break
        k = min(left, len(c.frames))
        out.append(dataclasses.replace(c, frames=c.frames[:k], guidance=c.guidance[:k], masks=c.masks[:k],
                                       latents=None if c.latents is None else c.latents[:k]))
        left -= k
    return out


def load_clips(cfg: TrainConfig) -> list[ClipTensors]:
    if not cfg.data_root:
        raise ConfigValidationError("data_root is not set")
    samples = read_dataset(cfg.data_root)
    if cfg.identities:
        samples = [s for s in samples if s.identity.identity_id in cfg.identities]
    samples = [s for s in samples if s.resolution == cfg.resolution]
    return limit_frames([clip_tensors(s) for s in samples], cfg.max_frames)


@torch.no_grad()
def encode_latents(model: Reenactor, clips: list[ClipTensors], chunk: int = 256) -> None:
    model.codec.eval()
    for c in clips:
        c.latents = torch.cat([model.codec.encode(c.frames[i:i + chunk]) for i in range(0, len(c.frames), chunk)])


# ------------------------------------------------------------------ state


def model_tensors(model: Reenactor) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def set_trainable(model: Reenactor, stage: str, freeze: Sequence[str] = ()) -> list[torch.nn.Parameter]:
    groups = model.parameter_groups()
    names = {n for g in TRAINABLE[stage] if g not in freeze for n in groups[g]}
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
        if name in names:
            params.append(p)
    return params


def build_model(cfg: ModelConfig, seed: int) -> Reenactor:
    torch.manual_seed(seed)
    return Reenactor(cfg)


def checkpoint_meta(cfg: TrainConfig, schedule: DiffusionSchedule, step: int, rng: np.random.Generator) -> dict:
    return {
        "model": cfg.model.to_dict(),
        "schedule": schedule.to_dict(),
        "train": cfg.to_dict(),
        "step": step,
        "numpy_rng": rng.bit_generator.state,
    }


def save_model(path, model: Reenactor, meta: dict, torch_gen: torch.Generator | None = None) -> None:
    tensors = model_tensors(model)
    if torch_gen is not None:
        tensors["rng.torch"] = torch_gen.get_state()
    save_checkpoint(path, tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint | str | Path, model_cfg: ModelConfig | None = None) -> Reenactor:
    """Rebuild a :class:`Reenactor` from a checkpoint's recorded architecture."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    saved = ModelConfig(**ckpt.meta["model"])
    if model_cfg is not None:
        _check_arch(saved, model_cfg)
        saved = dataclasses.replace(saved, use_alignment=model_cfg.use_alignment, use_hand_att=model_cfg.use_hand_att)
    model = Reenactor(saved)
    load_into(model, ckpt)
    return model


_ARCH_KEYS = ("c_z", "codec_width", "motion_channels", "global_dim", "global_tokens", "base_channels",
              "channel_mult", "heads", "max_frames", "hand_levels", "bank_size")


def _check_arch(saved: ModelConfig, wanted: ModelConfig) -> None:
    for k in _ARCH_KEYS:
        a, b = getattr(saved, k), getattr(wanted, k)
        if a != b:
            raise ConfigValidationError(f"checkpoint has model.{k} = {a}, config asks for {b}")


# ------------------------------------------------------------------ logging


class CsvLog:
    FIELDS = ("step", "loss", "lr", "wall_time")

    def __init__(self, path: str | Path | None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)
        self.t0 = time.perf_counter()

    def log(self, step: int, loss: float, lr: float) -> None:
        row = {"step": step, "loss": loss, "lr": lr, "wall_time": time.perf_counter() - self.t0}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in self.FIELDS])

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    model: Reenactor
    losses: list[float]
    checkpoint_path: Path | None
    meta: dict


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "cosine" and cfg.steps > cfg.warmup_steps:
        # decay to 2% of the peak over the post-warmup steps
        frac = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
        return cfg.learning_rate * (0.02 + 0.49 * (1 + math.cos(math.pi * frac)))
    return cfg.learning_rate


# ------------------------------------------------------------------ codec


def train_codec(cfg: TrainConfig, clips: list[ClipTensors] | None = None) -> TrainResult:
    """Pretrain the autoencoder with an L1 + MSE reconstruction loss, then fit the latent scale."""
    cfg = dataclasses.replace(cfg, stage="codec").validate()
    clips = load_clips(cfg) if clips is None else clips
    if not clips:
        raise InvalidArgumentError("no training frames")
    frames = torch.cat([c.frames for c in clips])
    model = build_model(cfg.model, cfg.seed)
    params = set_trainable(model, "codec")
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1), eta_min=cfg.learning_rate * 0.02)
    rng = np.random.default_rng(cfg.seed)
    log = CsvLog(cfg.log_path)
    codec = model.codec
    codec.train()
    for step in range(cfg.steps):
        lr = sched.get_last_lr()[0]
        if cfg.warmup_steps and step < cfg.warmup_steps:
            lr = _lr_at(cfg, step)
            for g in opt.param_groups:
                g["lr"] = lr
        x = frames[torch.from_numpy(rng.integers(0, len(frames), cfg.batch_size))]
        r = codec(x)
        loss = (r - x).abs().mean() + 4.0 * ((r - x) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        log.log(step, float(loss.detach()), lr)
    codec.eval()
    fit_latent_scale(codec, frames[torch.from_numpy(rng.permutation(len(frames))[:512])])
    meta = checkpoint_meta(cfg, DiffusionSchedule(), cfg.steps, rng)
    path = None
    if cfg.out_ckpt:
        path = Path(cfg.out_ckpt)
        save_checkpoint(path, {k: v for k, v in model.state_dict().items() if k.startswith("codec.")}, meta)
    return TrainResult(model, log.losses, path, meta)


# ------------------------------------------------------------------ diffusion


class Batcher:
    """Samples (window, reference frame) pairs uniformly from clips."""

    def __init__(self, clips: list[ClipTensors], n: int, rng: np.random.Generator):
        self.clips = [c for c in clips if len(c.frames) >= n]
        if not self.clips:
            raise InvalidArgumentError(f"no clip has at least n={n} frames")
        self.n = n
        self.rng = rng

    def sample(self, b: int):
        n = self.n
        g, m, z, rimg, rg, rz = [], [], [], [], [], []
        for _ in range(b):
            c = self.clips[self.rng.integers(len(self.clips))]
            s = int(self.rng.integers(0, len(c.frames) - n + 1))
            r = int(self.rng.integers(0, len(c.frames)))
            g.append(c.guidance[s:s + n])
            m.append(c.masks[s:s + n])
            z.append(c.latents[s:s + n])
            rimg.append(c.frames[r])
            rg.append(c.guidance[r])
            rz.append(c.latents[r])
        return (torch.cat(g), torch.cat(m), torch.cat(z), torch.stack(rimg), torch.stack(rg), torch.stack(rz))


def diffusion_loss(model: Reenactor, batch, n: int, schedule: DiffusionSchedule, gen: torch.Generator,
                   cfg_dropout: float = 0.0) -> torch.Tensor:
    g, m, z0, rimg, rg, rz = batch
    b = rimg.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    drop = torch.rand(b, generator=gen) < cfg_dropout if cfg_dropout > 0 else None
    ref = model.reference(rimg, rg, z_ref=rz, drop=drop)
    cond = model.conditions(g, m, ref, n)
    if drop is not None and cond.B is not None:
        cond.B = cond.B * (~drop).repeat_interleave(n).view(-1, 1, 1).to(cond.B.dtype)
    z_t = q_sample(z0, t.repeat_interleave(n), eps, schedule)
    pred = model.eps(z_t, t, cond, ref, n)
    return F.mse_loss(pred, eps)


def _prepare(cfg: TrainConfig, clips: list[ClipTensors] | None) -> tuple[Reenactor, dict, list[ClipTensors]]:
    if cfg.init_ckpt:
        ckpt = load_checkpoint(cfg.init_ckpt)
        if "train" in ckpt.meta and ckpt.meta["train"].get("stage") == "codec":
            raise ConfigValidationError(f"{cfg.init_ckpt} is a codec checkpoint; pass it as codec_ckpt")
        model = model_from_checkpoint(ckpt, cfg.model)
        src_stage = ckpt.meta.get("train", {}).get("stage")
        if cfg.stage == "2" and src_stage not in ("1", "2"):
            raise ConfigValidationError(f"stage 2 needs a stage-1 checkpoint, {cfg.init_ckpt} is stage {src_stage}")
        if cfg.stage == "finetune" and src_stage not in ("1", "2", "finetune"):
            raise ConfigValidationError(f"finetune needs a trained checkpoint, {cfg.init_ckpt} is stage {src_stage}")
    else:
        model = build_model(cfg.model, cfg.seed)
        codec_ckpt = load_checkpoint(cfg.codec_ckpt)
        _check_arch(ModelConfig(**codec_ckpt.meta["model"]), cfg.model) if "model" in codec_ckpt.meta else None
        if not load_into(model.codec, codec_ckpt, prefix="codec."):
            raise ConfigValidationError(f"{cfg.codec_ckpt} holds no codec parameters")
    clips = load_clips(cfg) if clips is None else clips
    if not clips:
        raise InvalidArgumentError("empty clip set")
    if any(c.latents is None for c in clips):
        encode_latents(model, clips)
    return model, {}, clips


def train_diffusion(
    cfg: TrainConfig,
    clips: list[ClipTensors] | None = None,
    eval_fn: Callable[[Reenactor, int], dict] | None = None,
) -> TrainResult:
    """Shared loop for stage 1, stage 2 and finetuning; ``cfg.stage`` picks the trainable groups."""
    cfg.validate()
    if cfg.stage == "codec":
        raise ConfigValidationError("use train_codec for the codec stage")
    model, _, clips = _prepare(cfg, clips)
    params = set_trainable(model, cfg.stage, cfg.freeze)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = DiffusionSchedule()
    batcher = Batcher(clips, cfg.n, rng)
    log = CsvLog(cfg.log_path)
    evals = []
    model.train()
    model.codec.eval()
    for step in range(cfg.steps):
        lr = _lr_at(cfg, step)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = diffusion_loss(model, batcher.sample(cfg.batch_size), cfg.n, schedule, gen, cfg.cfg_dropout)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.log(step, float(loss.detach()), lr)
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            model.eval()
            evals.append({"step": step + 1, **eval_fn(model, step + 1)})
            model.train()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    meta = checkpoint_meta(cfg, schedule, cfg.steps, rng)
    if evals:
        meta["evals"] = evals
    path = None
    if cfg.out_ckpt:
        path = Path(cfg.out_ckpt)
        save_model(path, model, meta, gen)
    return TrainResult(model, log.losses, path, meta)


def train_stage1(cfg: TrainConfig, clips: list[ClipTensors] | None = None) -> TrainResult:
    if cfg.stage != "1":
        raise ConfigValidationError(f"train_stage1 got stage {cfg.stage!r}")
    return train_diffusion(cfg, clips)


def train_stage2(cfg: TrainConfig, stage1_ckpt: str | Path | None = None, clips: list[ClipTensors] | None = None) -> TrainResult:
    if cfg.stage != "2":
        raise ConfigValidationError(f"train_stage2 got stage {cfg.stage!r}")
    if stage1_ckpt is not None:
        cfg = dataclasses.replace(cfg, init_ckpt=str(stage1_ckpt))
    return train_diffusion(cfg, clips)


def finetune(cfg: TrainConfig, generalized_ckpt: str | Path | None = None, clips: list[ClipTensors] | None = None,
             eval_fn: Callable[[Reenactor, int], dict] | None = None) -> TrainResult:
    """Adapt a trained checkpoint to one identity using at most ``cfg.max_frames`` frames."""
    if cfg.stage != "finetune":
        raise ConfigValidationError(f"finetune got stage {cfg.stage!r}")
    if generalized_ckpt is not None:
        cfg = dataclasses.replace(cfg, init_ckpt=str(generalized_ckpt))
    if clips is not None:
        clips = limit_frames(clips, cfg.max_frames)
        if not clips:
            raise InvalidArgumentError("finetune needs at least one clip")
    return train_diffusion(cfg, clips, eval_fn)


def describe_checkpoint(path: str | Path) -> str:
    ckpt = load_checkpoint(path)
    lines = [f"checkpoint {path}", f"step {ckpt.step}"]
    train = ckpt.meta.get("train", {})
    if train:
        lines.append(f"stage {train.get('stage')}")
    lines.append("model " + json.dumps(ckpt.meta.get("model", {}), sort_keys=True))
    counts: dict[str, int] = {}
    for name, arr in ckpt.tensors.items():
        head = name.split(".")[0]
        counts[head] = counts.get(head, 0) + int(np.prod(arr.shape))
    lines += [f"  {k:<16} {v:>10,d} values" for k, v in sorted(counts.items())]
    return "\n".join(lines)
