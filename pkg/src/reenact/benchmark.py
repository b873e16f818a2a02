"""Synthetic benchmark: data splits, training recipe and paired evaluations.

Everything here is deterministic given the seeds in :class:`BenchmarkSpec`.
The acceptance suite and the ``reenact`` CLI both build on these helpers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from .config import TrainConfig
from .alignment import correspondence, flatten_map
from .diffusion import DiffusionSchedule, InferencePlan
from .eval import MetricReport, evaluate_clip, landmark_distance, pixel_metrics
from .pipeline import ModelConfig, Reenactor, frames_to_tensor, infer_video
from .synthdata import ClipSample, Keypoints, align_driving_signal, render_clip, render_guidance, sample_identity, sample_motion
from .synthdata.generate import generate_clips, identity_seeds
from .synthdata.render import hand_mask_from_guidance
from .synthdata.scene import KEYPOINT_INDEX, MARKERS
from .trainer import (
    ClipTensors,
    clip_tensors,
    finetune,
    model_from_checkpoint,
    read_log,
    train_codec,
    train_stage1,
    train_stage2,
)


@dataclass
class BenchmarkSpec:
    resolution: int = 32
    fps: float = 25.0
    train_identities: int = 2
    train_clips: int = 4
    train_frames: int = 64
    eval_clips: int = 2
    eval_frames: int = 24
    codec_identities: int = 64
    codec_frames: int = 80
    finetune_durations: tuple[int, ...] = (250, 750, 3000)
    finetune_clip_frames: int = 250
    window: int = 8
    seed: int = 2024
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        c_z=4, base_channels=64, channel_mult=(1, 2), global_dim=64))


@dataclass
class BenchmarkData:
    train: list[ClipSample]
    eval: list[ClipSample]
    codec: list[ClipSample]
    heldout_eval: list[ClipSample]
    finetune: list[ClipSample]
    cross: list[tuple[ClipSample, ClipSample, ClipSample]]  # (reference clip of A, driving clip of B, target A<-B)


def _render(ident, seed: int, frames: int, res: int, clip_id: str, fps: float) -> ClipSample:
    return render_clip(ident, sample_motion(seed, frames, fps), res, clip_id=clip_id)


def build_data(spec: BenchmarkSpec) -> BenchmarkData:
    """Render every split. Identities: ``train_identities`` for diffusion training plus one held out."""
    s = spec.seed
    ids = [sample_identity(x) for x in identity_seeds(spec.train_identities + 1, s)]
    train_ids, held = ids[:-1], ids[-1]
    res, fps = spec.resolution, spec.fps
    train = [_render(i, s * 100 + k * 10 + c, spec.train_frames, res, f"train{c:02d}", fps)
             for k, i in enumerate(train_ids) for c in range(spec.train_clips)]
    evals = [_render(i, s * 100 + 50 + k * 10 + c, spec.eval_frames, res, f"eval{c:02d}", fps)
             for k, i in enumerate(train_ids) for c in range(spec.eval_clips)]
    heldout_eval = [_render(held, s * 100 + 80 + c, spec.eval_frames, res, f"heldout{c:02d}", fps)
                    for c in range(spec.eval_clips)]
    n_ft = -(-max(spec.finetune_durations) // spec.finetune_clip_frames)
    finetune = [_render(held, s * 100 + 90 + c * 7, spec.finetune_clip_frames, res, f"ft{c:02d}", fps)
                for c in range(n_ft)]
    codec = generate_clips(spec.codec_identities, 1, spec.codec_frames, res, seed=s + 1, fps=fps)
    codec += generate_clips(ids, 1, spec.codec_frames, res, seed=s + 2, fps=fps)
    cross = []
    for k, a in enumerate(train_ids):
        b = train_ids[(k + 1) % len(train_ids)]
        ref_clip = next(c for c in evals if c.identity == a)
        drv_clip = next(c for c in evals if c.identity == b)
        target = render_clip(a, drv_clip.poses, res, clip_id=f"cross_{a.identity_id}_{b.identity_id}")
        cross.append((ref_clip, drv_clip, target))
    return BenchmarkData(train, evals, codec, heldout_eval, finetune, cross)


def tensors(clips: list[ClipSample]) -> list[ClipTensors]:
    return [clip_tensors(c) for c in clips]


def stage_configs(spec: BenchmarkSpec, workdir: Path, **overrides) -> dict[str, TrainConfig]:
    """The recipe: codec pretraining, stage 1, stage 2 and finetuning."""
    w = Path(workdir)
    model = dataclasses.replace(spec.model, **{k: v for k, v in overrides.items() if hasattr(spec.model, k)})
    common = dict(resolution=spec.resolution, seed=spec.seed, model=model)
    return {
        "codec": TrainConfig(stage="codec", steps=3000, batch_size=32, out_ckpt=str(w / "codec.bin"),
                             log_path=str(w / "codec.csv"), **common),
        "1": TrainConfig(stage="1", steps=16000, batch_size=8, lr=5e-4, lr_schedule="cosine", codec_ckpt=str(w / "codec.bin"),
                         out_ckpt=str(w / "stage1.bin"), log_path=str(w / "stage1.csv"), cfg_dropout=0.0, **common),
        "2": TrainConfig(stage="2", n=spec.window, steps=3000, batch_size=2, lr=5e-4, lr_schedule="cosine", init_ckpt=str(w / "stage1.bin"),
                         out_ckpt=str(w / "stage2.bin"), log_path=str(w / "stage2.csv"), cfg_dropout=0.0, **common),
        "finetune": TrainConfig(stage="finetune", n=spec.window, steps=400, batch_size=2, init_ckpt=str(w / "stage2.bin"),
                                out_ckpt=str(w / "finetune.bin"), log_path=str(w / "finetune.csv"), cfg_dropout=0.0,
                                **common),
    }


# ------------------------------------------------------------------ evaluation


def generate_self(model: Reenactor, clip: ClipSample, plan: InferencePlan, ref_index: int = 0) -> np.ndarray:
    """Self-driven generation: reference frame ``ref_index``, driven by the clip's own guidance."""
    g = np.stack([x.render for x in clip.guidance])
    m = np.stack([x.hand_mask for x in clip.guidance])
    return infer_video(model, clip.frames[ref_index], clip.guidance[ref_index].render, g, m, plan)


def copy_reference(clip: ClipSample, ref_index: int = 0) -> np.ndarray:
    return np.repeat(clip.frames[ref_index:ref_index + 1], len(clip), axis=0)


def self_driven_report(model: Reenactor | None, clips: list[ClipSample], plan: InferencePlan, resolution: int) -> MetricReport:
    """Metrics on held-out clips; ``model=None`` scores the copy-reference baseline."""
    rep = MetricReport(resolution=resolution, config={"plan": dataclasses.asdict(plan)})
    for c in clips:
        pred = copy_reference(c) if model is None else generate_self(model, c, plan)
        kps = [g.keypoints for g in c.guidance]
        rep.add(f"{c.identity.identity_id}/{c.clip_id}", evaluate_clip(pred, c.frames, kps, c.flow_gt, c.flow_valid))
    return rep


def cross_driving_guidance(ref_clip: ClipSample, drv_clip: ClipSample, ref_index: int = 0):
    """Retarget the driving clip's keypoints onto the reference identity and re-render guidance."""
    drv = np.stack([g.keypoints.xy for g in drv_clip.guidance])
    aligned, face = align_driving_signal(drv, ref_clip.guidance[ref_index].keypoints.xy,
                                         drv_clip.identity.face_shape_coeffs, ref_clip.identity.face_shape_coeffs,
                                         anchor_kps=drv_clip.guidance[0].keypoints.xy)
    renders = [render_guidance(Keypoints(k, g.keypoints.occluded), face, ref_clip.resolution)[0]
               for k, g in zip(aligned, drv_clip.guidance)]
    renders = np.stack(renders)
    masks = np.stack([hand_mask_from_guidance(r) for r in renders])
    return renders, masks


def cross_driven_landmarks(model: Reenactor | None, cross, plan: InferencePlan, ref_index: int = 0) -> dict[str, float]:
    """Mean landmark distance to exact targets over all cross pairs (and per group)."""
    acc = {"face": [], "body": [], "hand": [], "mean": []}
    for ref_clip, drv_clip, target in cross:
        if model is None:
            pred = copy_reference(ref_clip, ref_index)[: len(target)]
        else:
            g, m = cross_driving_guidance(ref_clip, drv_clip, ref_index)
            pred = infer_video(model, ref_clip.frames[ref_index], ref_clip.guidance[ref_index].render, g, m, plan)
        lm = landmark_distance(pred, [x.keypoints for x in target.guidance])
        for k in ("face", "body", "hand"):
            acc[k].append(getattr(lm, k))
        acc["mean"].append((lm.face + lm.body + lm.hand) / 3)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def hand_correspondence_mass(model: Reenactor, clip: ClipSample, ref_index: int = 0) -> float:
    """Softmax mass that driving palm cells put on the reference hand region.

    For every visible palm keypoint of every driving frame, takes the
    correspondence row at the latent cell holding the keypoint and sums its
    softmax over reference cells touched by the hand mask. Uniform rows give
    the hand area fraction; a working alignment gives most of the mass.
    """
    g = frames_to_tensor(np.stack([x.render for x in clip.guidance]))
    with torch.no_grad():
        f = model.motion_encoder(g)
        k = clip.resolution // f.shape[-1]
        fl = flatten_map(f)
        P = correspondence(fl, fl[ref_index:ref_index + 1].expand_as(fl)).softmax(-1).numpy()
    ref_mask = torch.from_numpy(clip.guidance[ref_index].hand_mask.astype(np.float32))[None, None]
    ref_cells = torch.nn.functional.max_pool2d(ref_mask, k).flatten().numpy() > 0
    palms = [KEYPOINT_INDEX[name] for _, name, group in MARKERS if group == "hand"]
    masses = []
    for t, frame in enumerate(clip.guidance):
        for idx in palms:
            if frame.keypoints.occluded[idx]:
                continue
            x, y = np.clip((frame.keypoints.xy[idx] // k).astype(int), 0, f.shape[-1] - 1)
            masses.append(P[t, y * f.shape[-1] + x, ref_cells].sum())
    return float(np.mean(masses)) if masses else float("nan")


def mean_psnr(model: Reenactor | None, clips: list[ClipSample], plan: InferencePlan) -> float:
    vals = []
    for c in clips:
        pred = copy_reference(c) if model is None else generate_self(model, c, plan)
        vals.append(pixel_metrics(pred, c.frames)[1])
    return float(np.mean(vals))


def default_plan(spec: BenchmarkSpec, **kw) -> InferencePlan:
    return InferencePlan(window=spec.window, **kw)


def schedule() -> DiffusionSchedule:
    return DiffusionSchedule()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


# ------------------------------------------------------------------ orchestration

_VARIANTS = {"full": {}, "no_align": {"use_alignment": False}, "no_hand": {"use_hand_att": False}}


class BenchmarkRun:
    """Trains benchmark checkpoints on demand and caches them, plus their reports, on disk.

    Variant names: ``full`` (stage 1 then 2), ``full_stage1``, ``no_align``,
    ``no_hand`` (ablations trained with the same recipe), ``ft<frames>``
    (``full`` finetuned on the held-out identity) and ``None`` for the
    copy-reference baseline. The cache directory is keyed by a hash of the BenchmarkSpec and recipe.
    """

    def __init__(self, spec: BenchmarkSpec, root: str | Path):
        self.spec = spec
        key = hashlib.sha1(json.dumps(_spec_dict(spec), sort_keys=True).encode()).hexdigest()[:10]
        self.dir = Path(root) / key
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "spec.json").write_text(json.dumps(_spec_dict(spec), indent=1))
        self._data: BenchmarkData | None = None
        self._models: dict[str, Reenactor] = {}
        self.plan = default_plan(spec)

    @property
    def data(self) -> BenchmarkData:
        if self._data is None:
            self._data = build_data(self.spec)
        return self._data

    def _lock(self, name: str) -> FileLock:
        return FileLock(str(self.dir / f"{name}.lock"))

    def _configs(self, variant: str) -> dict[str, TrainConfig]:
        w = self.dir if variant == "full" else self.dir / variant
        w.mkdir(exist_ok=True)
        cfgs = stage_configs(self.spec, w, **_VARIANTS[variant])
        cfgs["1"].codec_ckpt = str(self.dir / "codec.bin")
        return cfgs

    def codec(self) -> Path:
        path = self.dir / "codec.bin"
        with self._lock("codec"):
            if not path.exists():
                train_codec(self._configs("full")["codec"], tensors(self.data.codec))
        return path

    def checkpoint(self, variant: str) -> Path:
        """Path of a trained checkpoint, training it (and its prerequisites) if missing."""
        if variant.startswith("ft"):
            return self._finetuned(int(variant[2:]))
        base, stage = (variant[: -len("_stage1")], "1") if variant.endswith("_stage1") else (variant, "2")
        cfgs = self._configs(base)
        path = Path(cfgs[stage].out_ckpt)
        if path.exists():
            return path
        self.codec()
        with self._lock(f"{base}_{stage}"):
            if not path.exists():
                if stage == "2":
                    self.checkpoint(f"{base}_stage1")
                    train_stage2(cfgs["2"], clips=tensors(self.data.train))
                else:
                    train_stage1(cfgs["1"], clips=tensors(self.data.train))
        return path

    def _finetuned(self, frames: int) -> Path:
        cfg = self._configs("full")["finetune"]
        path = self.dir / f"ft{frames}.bin"
        if path.exists():
            return path
        init = self.checkpoint("full")
        with self._lock(f"ft{frames}"):
            if not path.exists():
                cfg = dataclasses.replace(cfg, init_ckpt=str(init), out_ckpt=str(path), max_frames=frames,
                                          log_path=str(self.dir / f"ft{frames}.csv"))
                finetune(cfg, clips=tensors(self.data.finetune))
        return path

    def model(self, variant: str) -> Reenactor:
        if variant not in self._models:
            self._models[variant] = model_from_checkpoint(self.checkpoint(variant)).eval()
        return self._models[variant]

    def _maybe_model(self, variant: str | None) -> Reenactor | None:
        return None if variant is None else self.model(variant)

    def losses(self, variant: str, stage: str) -> list[float]:
        self.checkpoint(variant if stage == "2" else f"{variant}_stage1")
        sub = self.dir if variant == "full" else self.dir / variant
        return [r["loss"] for r in read_log(sub / f"stage{stage}.csv")]

    def _cached_report(self, name: str, make) -> MetricReport:
        path = self.dir / "reports" / f"{name}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return MetricReport(per_clip=d["per_clip"], config=d["config"], resolution=d["resolution"])
        rep = make()
        path.parent.mkdir(exist_ok=True)
        rep.save(path)
        return rep

    def self_report(self, variant: str | None) -> MetricReport:
        """Self-driven metrics on held-out clips of the training identities."""
        return self._cached_report(f"self_{variant or 'copy'}", lambda: self_driven_report(
            self._maybe_model(variant), self.data.eval, self.plan, self.spec.resolution))

    def heldout_report(self, variant: str | None) -> MetricReport:
        """Self-driven metrics on clips of the identity excluded from diffusion training."""
        return self._cached_report(f"heldout_{variant or 'copy'}", lambda: self_driven_report(
            self._maybe_model(variant), self.data.heldout_eval, self.plan, self.spec.resolution))

    def cross(self, variant: str | None) -> dict[str, float]:
        path = self.dir / "reports" / f"cross_{variant or 'copy'}.json"
        if path.exists():
            return json.loads(path.read_text())
        out = cross_driven_landmarks(self._maybe_model(variant), self.data.cross, self.plan)
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(out, indent=1))
        return out


def _spec_dict(spec: BenchmarkSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["model"] = spec.model.to_dict()
    d["recipe"] = {k: {f: v for f, v in c.to_dict().items() if f in ("steps", "batch_size", "lr", "n", "cfg_dropout",
                                                                       "warmup_steps", "weight_decay", "lr_schedule")}
                   for k, c in stage_configs(spec, Path(".")).items()}
    return d
