"""``reenact`` command-line entry point.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigValidationError, InvalidArgumentError

log = logging.getLogger("reenact")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--config", type=Path, help="flat key = value config file; its values override flags")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reenact", description="Synthetic avatar reenactment with a two-branch latent diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--clips", type=int, default=1, help="clips per identity")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--out", type=Path, required=True)

    for name, hlp in (("train-codec", "pretrain the autoencoder"), ("train", "train stage 1 or 2"),
                      ("finetune", "few-shot finetune on one identity")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--data", type=Path, help="dataset root")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--res", type=int)
        p.add_argument("--identities", help="comma-separated identity ids (default: all)")
        p.add_argument("--out", type=Path, required=True, help="output checkpoint")
        p.add_argument("--log", type=Path, help="CSV training log")
        if name == "train":
            p.add_argument("--stage", choices=("1", "2"), default="1")
            p.add_argument("--n", type=int, help="window length (stage 2)")
            p.add_argument("--codec-ckpt", type=Path)
            p.add_argument("--init-ckpt", type=Path)
        if name == "finetune":
            p.add_argument("--init-ckpt", type=Path, required=True)
            p.add_argument("--max-frames", type=int, help="total frames of finetune data")

    p = sub.add_parser("infer", help="generate a video from a reference image and guidance frames")
    _common(p)
    p.add_argument("--ref", type=Path, required=True, help="reference frame PNG")
    p.add_argument("--ref-guidance", type=Path, help="guidance PNG of the reference frame")
    p.add_argument("--guidance", type=Path, required=True, help="directory of driving guidance PNGs")
    p.add_argument("--hand-masks", type=Path, help="directory of hand-mask PNGs")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output frame directory")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--guidance-scale", type=float, default=1.0)

    p = sub.add_parser("eval", help="score generated frames against a dataset clip")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of generated PNG frames")
    p.add_argument("--clip", type=Path, required=True, help="ground-truth clip directory")
    p.add_argument("--json", type=Path, help="write the MetricReport here")

    p = sub.add_parser("inspect", help="summarize and validate a checkpoint or config")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    return parser


# ------------------------------------------------------------------ commands


def _train_config(args, stage: str):
    from .config import TrainConfig, load_config

    cfg = TrainConfig(stage=stage, seed=args.seed)
    if args.data:
        cfg.data_root = str(args.data)
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"), ("res", "resolution"),
                      ("n", "n"), ("max_frames", "max_frames")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    if args.identities:
        cfg.identities = tuple(s.strip() for s in args.identities.split(",") if s.strip())
    if getattr(args, "codec_ckpt", None):
        cfg.codec_ckpt = str(args.codec_ckpt)
    if getattr(args, "init_ckpt", None):
        cfg.init_ckpt = str(args.init_ckpt)
    cfg.out_ckpt = str(args.out)
    cfg.log_path = str(args.log) if args.log else ""
    if stage == "2" and args.n is None:
        cfg.n = 8
    if args.config:
        cfg = load_config(args.config, cfg)
    return cfg


def cmd_gen_data(args) -> int:
    from .synthdata import generate_clips, write_dataset

    if args.identities < 1 or args.clips < 1 or args.frames < 1:
        raise UsageError("--identities, --clips and --frames must be positive")
    cfg = _flat(args.config) if args.config else {}
    clips = generate_clips(int(cfg.get("identities", args.identities)), int(cfg.get("clips", args.clips)),
                           int(cfg.get("frames", args.frames)), int(cfg.get("res", args.res)),
                           seed=int(cfg.get("seed", args.seed)), fps=float(cfg.get("fps", args.fps)))
    manifest = write_dataset(clips, args.out, fps=args.fps)
    print(f"wrote {len(clips)} clips to {args.out} ({len(manifest['clips'])} in manifest)")
    return 0


def _flat(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise ConfigValidationError(f"{path}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def cmd_train_codec(args) -> int:
    from .trainer import train_codec

    cfg = _train_config(args, "codec")
    res = train_codec(cfg)
    print(f"codec trained for {cfg.steps} steps, final loss {res.losses[-1] if res.losses else float('nan'):.4f}; saved {res.checkpoint_path}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train_diffusion

    if args.stage == "2" and not args.init_ckpt and not args.config:
        raise UsageError("reenact train: --stage 2 requires --init-ckpt (a stage-1 checkpoint)")
    if args.stage == "1" and not (args.codec_ckpt or args.init_ckpt or args.config):
        raise UsageError("reenact train: --stage 1 requires --codec-ckpt (run train-codec first)")
    cfg = _train_config(args, args.stage)
    try:
        cfg.validate()
    except ConfigValidationError as exc:
        raise UsageError(f"reenact train: {exc}") from exc
    res = train_diffusion(cfg)
    print(f"stage {cfg.stage}: {cfg.steps} steps, final loss {res.losses[-1] if res.losses else float('nan'):.4f}; saved {res.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    from .trainer import train_diffusion

    cfg = _train_config(args, "finetune")
    if args.config is None and cfg.n == 1:
        cfg.n = 8
    res = train_diffusion(cfg)
    print(f"finetune: {cfg.steps} steps, final loss {res.losses[-1] if res.losses else float('nan'):.4f}; saved {res.checkpoint_path}")
    return 0


def _png_dir(path: Path) -> list[Path]:
    files = sorted(path.glob("*.png"))
    if not files:
        raise InvalidArgumentError(f"no PNG files in {path}")
    return files


def cmd_infer(args) -> int:
    from .diffusion import InferencePlan
    from .synthdata.dataset import load_png, save_png
    from .synthdata.render import hand_mask_from_guidance
    from .checkpoint import load_checkpoint
    from .pipeline import infer_video
    from .trainer import model_from_checkpoint
    from PIL import Image

    torch.manual_seed(args.seed)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    ref = load_png(args.ref)
    files = _png_dir(args.guidance)
    guidance = np.stack([load_png(f) for f in files])
    if args.ref_guidance:
        ref_g = load_png(args.ref_guidance)
    else:
        sibling = args.ref.parent.parent / "guidance" / args.ref.name
        ref_g = load_png(sibling) if sibling.exists() else guidance[0]
    if args.hand_masks:
        masks = np.stack([np.asarray(Image.open(args.hand_masks / f.name)) > 127 for f in files])
    else:
        masks = np.stack([hand_mask_from_guidance(g) for g in guidance])
    # default window: the one the checkpoint was trained with (stage 1 -> 8)
    trained_n = int(ckpt.meta.get("train", {}).get("n", 1))
    window = args.window or (trained_n if trained_n > 1 else 8)
    plan = InferencePlan(ddim_steps=args.steps, eta=args.eta, window=window, stride=args.stride, seed=args.seed,
                         guidance_scale=args.guidance_scale)
    if args.config:
        flat = _flat(args.config)
        plan = dataclasses.replace(plan, **{k: type(getattr(plan, k) if getattr(plan, k) is not None else 0)(v)
                                            for k, v in flat.items() if hasattr(plan, k)})
        plan.__post_init__()
    frames = infer_video(model, ref, ref_g, guidance, masks, plan)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(args.out / f"{i:05d}.png", f)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .eval import MetricReport, evaluate_clip
    from .synthdata import read_clip
    from .synthdata.dataset import load_png

    clip = read_clip(args.clip)
    files = _png_dir(args.pred)
    if len(files) != len(clip):
        raise InvalidArgumentError(f"{args.pred} has {len(files)} frames, clip has {len(clip)}")
    pred = np.stack([load_png(f) for f in files])
    rep = MetricReport(resolution=clip.resolution, config={"pred": str(args.pred), "clip": str(args.clip)})
    rep.add(clip.clip_id, evaluate_clip(pred, clip.frames, [g.keypoints for g in clip.guidance], clip.flow_gt, clip.flow_valid))
    print(rep.format_table())
    if args.json:
        rep.save(args.json)
    return 0


def cmd_inspect(args) -> int:
    from .config import format_config, load_config
    from .pipeline import Reenactor
    from .trainer import describe_checkpoint, model_from_checkpoint

    if args.ckpt is None and args.config is None:
        raise UsageError("reenact inspect: pass --ckpt and/or --config")
    if args.config:
        cfg = load_config(args.config).validate()
        print(format_config(cfg), end="")
        model = Reenactor(cfg.model)
        print(model.unet.summary())
        print(f"parameters: {sum(p.numel() for p in model.parameters()):,d}")
    if args.ckpt:
        print(describe_checkpoint(args.ckpt))
        model = model_from_checkpoint(args.ckpt)
        print(model.unet.summary())
        print("checkpoint OK")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigValidationError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def dispatch(argv: list[str]) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
