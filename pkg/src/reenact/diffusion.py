"""Noise schedule, forward noising, epsilon loss, DDIM sampling and
overlapping-window blending for long sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import InvalidArgumentError, NumericError

EpsModel = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class DiffusionSchedule:
    """Linear beta schedule; all tables are kept in float64."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1 or not (0 < beta_start <= beta_end < 1):
            raise InvalidArgumentError(f"bad schedule T={T}, betas {beta_start}..{beta_end}")
        self.T = T
        self.beta_start, self.beta_end = beta_start, beta_end
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas_bar = torch.cumprod(1.0 - self.betas, dim=0)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def alpha_bar(self, t) -> torch.Tensor:
        """``alphas_bar[t]`` with ``t = -1`` meaning the clean endpoint (1.0)."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t >= self.T).any() or (t < -1).any():
            raise InvalidArgumentError(f"timestep out of range [-1, {self.T})")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_bar])
        return padded[t + 1]


def _bcast(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    a = a.to(like.dtype)
    if a.dim() == 0:
        return a
    return a.view(-1, *([1] * (like.dim() - 1)))


def q_sample_ab(z0: torch.Tensor, alpha_bar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """``sqrt(ab) z0 + sqrt(1 - ab) eps`` for an explicit ``alpha_bar``."""
    if z0.shape != eps.shape:
        raise InvalidArgumentError(f"noise shape {tuple(eps.shape)} differs from latent {tuple(z0.shape)}")
    ab = _bcast(torch.as_tensor(alpha_bar, dtype=torch.float64), z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Noise ``z0`` to step ``t`` (scalar or one per leading batch entry)."""
    return q_sample_ab(z0, schedule.alpha_bar(t), eps)


def training_loss(model: EpsModel, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    pred = model(q_sample(z0, t, eps, schedule), t)
    return ((pred - eps) ** 2).mean()


@dataclass
class InferencePlan:
    ddim_steps: int = 50
    eta: float = 0.0
    window: int = 8
    stride: int | None = None
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.window // 2)
        if self.window < 1 or not (1 <= self.stride <= self.window):
            raise InvalidArgumentError(f"need 1 <= stride <= window, got stride={self.stride}, window={self.window}")
        if self.ddim_steps < 1 or self.eta < 0:
            raise InvalidArgumentError("ddim_steps must be >= 1 and eta >= 0")

    def validate(self, schedule: DiffusionSchedule) -> None:
        if self.ddim_steps > schedule.T:
            raise InvalidArgumentError(f"ddim_steps {self.ddim_steps} exceeds schedule length {schedule.T}")


def ddim_timesteps(steps: int, T: int) -> list[int]:
    """Evenly spaced descending timesteps starting at ``T - 1``."""
    if not 1 <= steps <= T:
        raise InvalidArgumentError(f"steps must be in [1, {T}]")
    stride = T / steps
    return [int(round(T - 1 - i * stride)) for i in range(steps)]


def ddim_step(x: torch.Tensor, eps: torch.Tensor, ab: torch.Tensor, ab_prev: torch.Tensor, eta: float, noise=None) -> torch.Tensor:
    x0 = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
    sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).sqrt()
    direction = (1 - ab_prev - sigma**2).clamp_min(0).sqrt() * eps
    out = ab_prev.sqrt() * x0 + direction
    if eta > 0:
        out = out + sigma * noise
    return out


@torch.no_grad()
def ddim_sample(model: EpsModel, x_T: torch.Tensor, schedule: DiffusionSchedule, plan: InferencePlan,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Run the DDIM reverse process from ``x_T``; the last step lands on alpha_bar = 1."""
    plan.validate(schedule)
    ts = ddim_timesteps(plan.ddim_steps, schedule.T)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        ab = schedule.alpha_bar(t).to(x.dtype)
        ab_prev = schedule.alpha_bar(t_prev).to(x.dtype)
        eps = model(x, torch.full((x.shape[0],), t, dtype=torch.long))
        noise = None
        if plan.eta > 0:
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x = ddim_step(x, eps, ab, ab_prev, plan.eta, noise)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite latent at DDIM step {i} (t={t})")
    return x


# ------------------------------------------------------------------ windows


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Start frames of overlapping windows covering ``length`` frames; the last window ends flush."""
    if length < 1:
        raise InvalidArgumentError("sequence length must be >= 1")
    if length <= window:
        return [0]
    starts = list(range(0, length - window, stride))
    starts.append(length - window)
    return starts


def blend_weights(starts: list[int], window: int, length: int) -> list[torch.Tensor]:
    """Per-window frame weights: linear ramps across each overlap, summing to 1 per frame."""
    win = min(window, length)
    raw = []
    for i, s in enumerate(starts):
        e = s + win
        f = torch.arange(s, e, dtype=torch.float64)
        w = torch.ones(win, dtype=torch.float64)
        if i > 0:
            overlap = starts[i - 1] + win - s
            if overlap > 0:
                w = torch.minimum(w, (f - s + 1) / (overlap + 1))
        if i + 1 < len(starts):
            overlap = e - starts[i + 1]
            if overlap > 0:
                w = torch.minimum(w, (e - f) / (overlap + 1))
        raw.append(w)
    total = torch.zeros(length, dtype=torch.float64)
    for s, w in zip(starts, raw):
        total[s:s + win] += w
    return [w / total[s:s + win] for s, w in zip(starts, raw)]


def blend_windows(window_latents: list[torch.Tensor], starts: list[int], length: int) -> torch.Tensor:
    """Cross-fade per-window latents ``(n, ...)`` into a ``(length, ...)`` sequence."""
    win = window_latents[0].shape[0]
    weights = blend_weights(starts, win, length)
    out = torch.zeros((length,) + tuple(window_latents[0].shape[1:]), dtype=window_latents[0].dtype)
    for s, z, w in zip(starts, window_latents, weights):
        out[s:s + win] += _bcast(w, z) * z
    return out
