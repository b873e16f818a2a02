"""Training configuration and its flat ``key = value`` text format.

One assignment per line; ``#`` starts a comment; tuples and lists are written
comma-separated. Model architecture keys carry a ``model.`` prefix::

    stage = 1
    lr = 1e-4
    steps = 2000
    data_root = data/train
    identities = id0000, id0001
    model.c_z = 8
    model.channel_mult = 1, 2
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from .errors import ConfigValidationError
from .pipeline import ModelConfig

STAGES = ("codec", "1", "2", "finetune")
DEFAULT_LR = {"codec": 2e-3, "1": 1e-4, "2": 1e-4, "finetune": 5e-5}


@dataclass
class TrainConfig:
    """Every knob of one training run.

    ``stage`` selects which parameter groups train: ``codec`` trains only the
    autoencoder, ``1`` all spatial non-codec parameters on single frames, ``2``
    only the temporal group on windows of ``n`` frames, ``finetune`` all
    non-codec parameters.
    """

    stage: str = "1"
    lr: float | None = None
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 2000
    n: int = 1
    resolution: int = 32
    data_root: str = ""
    identities: tuple[str, ...] = ()
    max_frames: int | None = None
    seed: int = 0
    init_ckpt: str = ""
    codec_ckpt: str = ""
    out_ckpt: str = "checkpoint.bin"
    log_path: str = ""
    freeze: tuple[str, ...] = ()
    cfg_dropout: float = 0.1
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    eval_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.stage = str(self.stage)

    @property
    def learning_rate(self) -> float:
        """``lr`` if set, else the stage default."""
        return self.lr if self.lr is not None else DEFAULT_LR.get(self.stage, 1e-4)

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ConfigValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.stage in ("codec", "1") and self.n != 1:
            raise ConfigValidationError(f"stage {self.stage} trains single frames; n must be 1, got {self.n}")
        if self.stage == "2" and self.n < 2:
            raise ConfigValidationError("stage 2 needs a window n >= 2")
        if self.stage in ("2", "finetune") and not self.init_ckpt:
            raise ConfigValidationError(f"stage {self.stage} requires init_ckpt")
        if self.stage == "1" and not (self.codec_ckpt or self.init_ckpt):
            raise ConfigValidationError("stage 1 requires codec_ckpt (a pretrained codec)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigValidationError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigValidationError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ConfigValidationError("lr must be positive")
        if not 0 <= self.cfg_dropout < 1:
            raise ConfigValidationError("cfg_dropout must be in [0, 1)")
        if self.n > self.model.max_frames:
            raise ConfigValidationError(f"n={self.n} exceeds model.max_frames={self.model.max_frames}")
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(**d, model=model)


def _convert(raw: str, tp: Any, key: str):
    origin = get_origin(tp)
    args = get_args(tp)
    try:
        if origin is tuple:
            inner = args[0] if args else str
            return tuple(_convert(p.strip(), inner, key) for p in raw.split(",") if p.strip())
        if type(None) in args:  # Optional[X]
            if raw.lower() in ("", "none"):
                return None
            return _convert(raw, next(a for a in args if a is not type(None)), key)
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigValidationError(f"config key {key!r}: cannot parse {raw!r} as {tp}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key = value`` lines on top of ``base`` (default values when None)."""
    cfg = dataclasses.replace(base) if base else TrainConfig()
    cfg.model = dataclasses.replace(cfg.model)
    top = get_type_hints(TrainConfig)
    sub = get_type_hints(ModelConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in sub:
                raise ConfigValidationError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg.model, name, _convert(value, sub[name], key))
        elif key in top and key != "model":
            setattr(cfg, key, _convert(value, top[key], key))
        else:
            raise ConfigValidationError(f"line {lineno}: unknown key {key!r}")
    cfg.model.__post_init__()
    cfg.__post_init__()
    return cfg


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def format_config(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return "none" if v is None else str(v)

    lines = [f"{f.name} = {fmt(getattr(cfg, f.name))}" for f in fields(cfg) if f.name != "model"]
    lines += [f"model.{f.name} = {fmt(getattr(cfg.model, f.name))}" for f in fields(cfg.model)]
    return "\n".join(lines) + "\n"
