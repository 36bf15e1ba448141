"""Training stages 0/1/2, evaluation, and latent metrics."""

from __future__ import annotations

import csv
import hashlib
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from skimage.metrics import structural_similarity

from . import backbone as bb
from . import fusion as fu
from . import injection as inj
from . import lifting as lf
from . import tensor_core as tc
from .camera import CameraPose, embed_delta, target_rays, view_delta
from .config import RunConfig
from .data import Dataset, SyntheticObject, eval_views, gen_object, object_seed, sample_training_views
from .tensor_core import Adam, ParamSet

PSNR_IDENTICAL = 99.0
PEAK = 2.0


class MissingPrerequisite(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# metrics


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    mse = ((pred.double() - target.double()) ** 2).mean().item()
    if mse == 0:
        return PSNR_IDENTICAL
    return 10 * math.log10(PEAK ** 2 / mse)


def ssim(pred: torch.Tensor, target: torch.Tensor) -> float:
    """7x7 uniform-window SSIM per channel of a (C, H, W) latent, averaged over channels."""
    a = pred.detach().double().numpy()
    b = target.detach().double().numpy()
    return float(structural_similarity(a, b, win_size=7, data_range=PEAK, channel_axis=0))


def latent_mse(pred: torch.Tensor, target: torch.Tensor) -> float:
    return ((pred.double() - target.double()) ** 2).mean().item()


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Models:
    cfg: RunConfig
    lift_cfg: lf.LiftingConfig = field(init=False)
    fuse_cfg: fu.FusionConfig = field(init=False)
    bb_cfg: bb.BackboneConfig = field(init=False)
    schedule: bb.NoiseSchedule = field(init=False)

    def __post_init__(self):
        self.lift_cfg = lf.LiftingConfig.from_run(self.cfg)
        self.fuse_cfg = fu.FusionConfig.from_run(self.cfg)
        self.bb_cfg = bb.BackboneConfig.from_run(self.cfg)
        self.schedule = bb.NoiseSchedule.from_run(self.cfg)


def init_stage1_params(m: Models, seed: int) -> ParamSet:
    gen = torch.Generator().manual_seed(seed)
    return lf.init_lifting(m.lift_cfg, gen).merged(fu.init_readout(m.lift_cfg.C - 1, gen))


def closest_view(poses: list[CameraPose], target: CameraPose) -> int:
    """Index of the input whose azimuth is nearest the target's (first on ties)."""
    gaps = [abs(view_delta(p, target).d_theta) for p in poses]
    return int(np.argmin(gaps))


@dataclass
class Batch:
    inputs: torch.Tensor        # (B, n, 4, H, W)
    input_poses: list[list[CameraPose]]
    target: torch.Tensor        # (B, 4, H, W)
    target_poses: list[CameraPose]

    @property
    def main(self) -> torch.Tensor:
        idx = [closest_view(ps, t) for ps, t in zip(self.input_poses, self.target_poses)]
        return torch.stack([self.inputs[b, i] for b, i in enumerate(idx)])

    @property
    def main_delta(self) -> torch.Tensor:
        out = []
        for ps, t in zip(self.input_poses, self.target_poses):
            out.append(embed_delta(view_delta(ps[closest_view(ps, t)], t)))
        return torch.stack(out).to(self.target.dtype)


def fuse_batch(params: ParamSet, m: Models, grids: torch.Tensor, input_poses: list[list[CameraPose]],
               target_poses: list[CameraPose], gen: torch.Generator | None = None) -> torch.Tensor:
    """Lift every input view toward its target and render the fused target latent, (B, 4, H, W)."""
    b, n = grids.shape[:2]
    dtype = grids.dtype
    embeds = torch.stack([embed_delta(view_delta(p, t)) for ps, t in zip(input_poses, target_poses) for p in ps])
    planes = lf.lift_batch(params, m.lift_cfg, grids.reshape(b * n, *grids.shape[2:]), embeds.to(dtype))
    planes = planes.reshape(b, n, *planes.shape[1:])
    rots = torch.stack([fu.frame_rotations(ps, dtype) for ps in input_poses])
    d_thetas = torch.tensor([[view_delta(p, t).d_theta for p in ps] for ps, t in zip(input_poses, target_poses)],
                            dtype=dtype)
    weights = fu.view_weights_tensor(d_thetas)
    rays = [target_rays(t, m.fuse_cfg.grid, m.fuse_cfg.fov_deg, dtype) for t in target_poses]
    origins = torch.stack([r.origins for r in rays])
    dirs = torch.stack([r.directions for r in rays])
    out, _ = fu.render_batch(params, planes, rots, weights, origins, dirs, m.fuse_cfg, m.cfg.triplane_extent, gen)
    return out


# ---------------------------------------------------------------------------
# data order


def _seq_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _torch_gen(*key: int) -> torch.Generator:
    seed = int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0] & ((1 << 63) - 1))
    return torch.Generator().manual_seed(seed)


def steps_per_epoch(n_objects: int, batch: int, repeats: int = 1) -> int:
    return max(1, math.ceil(n_objects * repeats / batch))


def make_batch(objects: list[SyntheticObject], cfg: RunConfig, stage: int, step: int, batch: int,
               repeats: int = 1) -> Batch:
    """Deterministic function of (seed, stage, step).

    An epoch visits every object ``repeats`` times in shuffled order; each visit
    draws a fresh front/back/random/target quadruple.
    """
    spe = steps_per_epoch(len(objects), batch, repeats)
    epoch, within = divmod(step, spe)
    order = _seq_rng(cfg.seed, stage, epoch).permutation(len(objects) * repeats) % len(objects)
    picks = order[within * batch:(within + 1) * batch]
    samples = []
    for j, oi in enumerate(picks):
        rng = _seq_rng(cfg.seed, stage, step, j)
        samples.append(sample_training_views(objects[oi], rng, cfg.data_grid, cfg.camera_fov_deg,
                                             cfg.camera_elev_deg, cfg.camera_radius))
    inputs = torch.stack([torch.stack([v.grid for v in s.inputs]) for s in samples])
    return Batch(inputs, [[v.pose for v in s.inputs] for s in samples],
                 torch.stack([s.target.grid for s in samples]), [s.target.pose for s in samples])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StageResult:
    params: ParamSet
    losses: list[float]
    steps: int
    ckpt: Path | None


def _stage_settings(cfg: RunConfig, stage: int) -> tuple[int, int, int, float]:
    return (getattr(cfg, f"stage{stage}_epochs"), getattr(cfg, f"stage{stage}_batch"),
            getattr(cfg, f"stage{stage}_repeats"), getattr(cfg, f"stage{stage}_lr"))


def ckpt_path(out: Path, stage: int) -> Path:
    return Path(out) / f"stage{stage}.ckpt"


def _save_optimizer(opt: Adam, path: Path) -> None:
    tc.write_envelope(path, {"kind": "optimizer", "lr": opt.lr}, opt.state_entries())


def _load_optimizer(path: Path, lr: float) -> Adam:
    meta, entries = tc.read_envelope(path)
    opt = Adam(lr)
    for e, arr in entries:
        name = e["name"]
        t = torch.from_numpy(arr.copy()).to(tc.default_dtype())
        if name == "__step__":
            opt.step_count = int(t.item())
        elif name.startswith("__m__."):
            opt.m[name[6:]] = t
        elif name.startswith("__v__."):
            opt.v[name[6:]] = t
    return opt


def train_loop(stage: int, params: ParamSet, loss_fn: Callable[[ParamSet, Batch, torch.Generator], torch.Tensor],
               cfg: RunConfig, objects: list[SyntheticObject], out: Path | None, resume: bool = False,
               stop_after: int | None = None, save_prefixes: tuple[str, ...] = ("",),
               progress: Callable[[int, float], None] | None = None) -> StageResult:
    epochs, batch, repeats, lr = _stage_settings(cfg, stage)
    total = epochs * steps_per_epoch(len(objects), batch, repeats)
    opt, start, losses = Adam(lr), 0, []
    if resume and out is not None:
        saved = ParamSet.load(ckpt_path(out, stage))
        with torch.no_grad():
            for n in saved:
                params[n].copy_(saved[n])
        opt = _load_optimizer(Path(out) / f"stage{stage}.opt", lr)
        start = opt.step_count
        losses = _read_losses(Path(out) / f"stage{stage}_loss.csv")[:start]
    params.requires_grad_()
    end = total if stop_after is None else min(total, stop_after)
    for step in range(start, end):
        b = make_batch(objects, cfg, stage, step, batch, repeats)
        loss = loss_fn(params, b, _torch_gen(cfg.seed, stage, step, 99))
        value = loss.item()
        if not math.isfinite(value):
            raise tc.NumericalError(f"stage {stage}: non-finite loss at step {step}")
        opt.step(params, tc.grad(loss, params))
        losses.append(value)
        if progress is not None:
            progress(step, value)
    for n in params:
        params[n].requires_grad_(False)
    path = None
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        path = ckpt_path(out, stage)
        keep = [n for n in params if n.startswith(save_prefixes) and params.is_trainable(n)]
        ParamSet({n: params[n] for n in keep}).save(path)
        _save_optimizer(opt, out / f"stage{stage}.opt")
        with open(out / f"stage{stage}_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(losses):
                w.writerow([i, repr(v)])
        (out / f"stage{stage}.config").write_text(cfg.to_text(), encoding="utf-8")
    return StageResult(params, losses, end, path)


def _read_losses(path: Path) -> list[float]:
    with open(path) as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def _objects(ds: Dataset | list[SyntheticObject]) -> list[SyntheticObject]:
    if isinstance(ds, Dataset):
        objs = ds.objects()
    else:
        objs = list(ds)
    if not objs:
        raise ValueError("training set is empty")
    return objs


def train_stage0(cfg: RunConfig, dataset, out: Path | None = None, **kw) -> StageResult:
    m = Models(cfg)
    params = bb.init_backbone(m.bb_cfg, torch.Generator().manual_seed(cfg.seed))

    def loss_fn(p, b: Batch, gen):
        return bb.diffusion_loss(p, m.bb_cfg, m.schedule, b.target, b.main, b.main_delta, gen)

    return train_loop(0, params, loss_fn, cfg, _objects(dataset), out, save_prefixes=(bb.PREFIX,), **kw)


def train_stage1(cfg: RunConfig, dataset, out: Path | None = None, **kw) -> StageResult:
    m = Models(cfg)
    params = init_stage1_params(m, cfg.seed + 1)

    def loss_fn(p, b: Batch, gen):
        return tc.mse(fuse_batch(p, m, b.inputs, b.input_poses, b.target_poses, gen), b.target)

    return train_loop(1, params, loss_fn, cfg, _objects(dataset), out, save_prefixes=(lf.PREFIX, fu.PREFIX), **kw)


def load_prerequisite(path: Path, what: str) -> ParamSet:
    if not Path(path).exists():
        raise MissingPrerequisite(f"missing prerequisite {path} ({what} archive)")
    return ParamSet.load(path)


def stage2_loss_terms(p: ParamSet, m: Models, b: Batch, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    f_t = fuse_batch(p, m, b.inputs, b.input_poses, b.target_poses, gen)
    delta = b.main_delta
    injector = inj.make_injector(p, m.bb_cfg, f_t, delta)
    diff = bb.diffusion_loss(p, m.bb_cfg, m.schedule, b.target, b.main, delta, gen, injector)
    return diff, tc.mse(f_t, b.target)


def train_stage2(cfg: RunConfig, dataset, stage0_ckpt: Path, stage1_ckpt: Path, out: Path | None = None,
                 **kw) -> StageResult:
    m = Models(cfg)
    backbone = load_prerequisite(stage0_ckpt, bb.PREFIX)
    stage1 = load_prerequisite(stage1_ckpt, lf.PREFIX)
    before = hashlib.sha256(Path(stage0_ckpt).read_bytes()).hexdigest()
    backbone.freeze()
    injp = inj.init_from_backbone(backbone, m.bb_cfg, torch.Generator().manual_seed(cfg.seed + 2), cfg.inject_use_xt)
    inj.check_against_backbone(injp, m.bb_cfg)
    params = ParamSet(stage1.tensors).merged(injp, backbone)

    def loss_fn(p, b: Batch, gen):
        diff, rec = stage2_loss_terms(p, m, b, gen)
        return cfg.stage2_w_diff * diff + cfg.stage2_w_mse * rec

    res = train_loop(2, params, loss_fn, cfg, _objects(dataset), out, save_prefixes=(lf.PREFIX, fu.PREFIX, inj.PREFIX),
                     **kw)
    after = ParamSet({n: res.params[n] for n in res.params if n.startswith(bb.PREFIX)})
    with tempfile.TemporaryDirectory() as d:
        after.save(Path(d) / "backbone.ckpt")
        if hashlib.sha256((Path(d) / "backbone.ckpt").read_bytes()).hexdigest() != before:
            raise RuntimeError("frozen backbone changed during stage 2")
    return res


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    object_seed: int
    condition: str  # "baseline" or "n=<k>"
    psnr: float
    ssim: float
    mse: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config_hash: str
    runtime_s: float
    recon_mse: dict[str, float] = field(default_factory=dict)

    def mean(self, condition: str, metric: str = "psnr") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.condition == condition]
        return float(np.mean(vals)) if vals else float("nan")

    def conditions(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.condition not in seen:
                seen.append(r.condition)
        return seen

    def write_csv(self, path: str | Path) -> None:
        """Per-object rows, per-condition means, optional reconstruction rows.

        Wall-clock runtime is left out so a rerun with the same seed is byte-identical.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "object_seed", "condition", "psnr", "ssim", "mse", "config_hash"])
            for r in self.rows:
                w.writerow(["object", r.object_seed, r.condition, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.mse:.8f}",
                            self.config_hash])
            for c in self.conditions():
                w.writerow(["mean", "", c, f"{self.mean(c):.6f}", f"{self.mean(c, 'ssim'):.6f}",
                            f"{self.mean(c, 'mse'):.8f}", self.config_hash])
            for c, v in self.recon_mse.items():
                w.writerow(["recon_mse", "", c, "", "", f"{v:.8f}", self.config_hash])


def _targets_batch(obj: SyntheticObject, n: int, m: Models):
    ins, tgts = eval_views(obj, n, m.cfg.data_grid, m.cfg.camera_fov_deg, m.cfg.eval_targets, m.cfg.camera_radius)
    k = len(tgts.poses)
    grids = torch.stack([v.grid for v in ins.latents])[None].expand(k, -1, -1, -1, -1)
    gt = torch.stack([v.grid for v in tgts.latents])
    return ins, tgts, grids, gt


@torch.no_grad()
def reconstruction_mse(stage1: ParamSet, m: Models, objects: list[SyntheticObject], view_counts=(1, 3)
                       ) -> dict[str, float]:
    """Held-out fused-latent MSE per view count, plus the all-zero prediction baseline."""
    out: dict[str, list[float]] = {"zero": []}
    for obj in objects:
        for n in view_counts:
            ins, tgts, grids, gt = _targets_batch(obj, n, m)
            f_t = fuse_batch(stage1, m, grids, [ins.poses] * len(tgts.poses), tgts.poses)
            out.setdefault(f"n={n}", []).append(latent_mse(f_t, gt))
        out["zero"].append(latent_mse(torch.zeros_like(gt), gt))
    return {k: float(np.mean(v)) for k, v in out.items()}


@torch.no_grad()
def sample_views(m: Models, backbone: ParamSet, stage2: ParamSet | None, inputs: list, input_poses: list[CameraPose],
                 targets: list[CameraPose], gen: torch.Generator, log_step=None) -> torch.Tensor:
    """DDPM-sample target latents from input latents; ``stage2=None`` runs the backbone alone."""
    k = len(targets)
    grids = torch.stack(inputs)[None].expand(k, -1, -1, -1, -1)
    idx = [closest_view(input_poses, t) for t in targets]
    main = torch.stack([grids[j, i] for j, i in enumerate(idx)])
    delta = torch.stack([embed_delta(view_delta(input_poses[i], t)) for i, t in zip(idx, targets)]).to(main.dtype)
    injector = None
    if stage2 is not None:
        f_t = fuse_batch(stage2, m, grids, [input_poses] * k, targets)
        injector = inj.make_injector(stage2, m.bb_cfg, f_t, delta)
    return bb.ddpm_sample(backbone, m.bb_cfg, main, delta, m.schedule, gen, injector, log=log_step)


def evaluate(cfg: RunConfig, backbone: ParamSet, stage2: ParamSet | None, objects: list[SyntheticObject],
             view_counts=(1, 2, 3, 4), stage1: ParamSet | None = None, baseline: bool = True) -> EvalReport:
    if not objects:
        raise ValueError("evaluation set is empty")
    t0 = time.time()
    m = Models(cfg)
    rows = []
    for oi, obj in enumerate(objects):
        conds = [("baseline", 1, None)] if baseline else []
        if stage2 is not None:
            conds += [(f"n={n}", n, stage2) for n in view_counts]
        for name, n, params in conds:
            ins, tgts, _, gt = _targets_batch(obj, n, m)
            gen = _torch_gen(cfg.seed, 7, oi)
            pred = sample_views(m, backbone, params, [v.grid for v in ins.latents], ins.poses, tgts.poses, gen)
            rows.append(EvalRow(obj.seed, name,
                                float(np.mean([psnr(pred[j], gt[j]) for j in range(len(gt))])),
                                float(np.mean([ssim(pred[j], gt[j]) for j in range(len(gt))])),
                                float(np.mean([latent_mse(pred[j], gt[j]) for j in range(len(gt))]))))
    recon = reconstruction_mse(stage1, m, objects) if stage1 is not None else {}
    return EvalReport(rows, cfg.digest(), time.time() - t0, recon)


def eval_objects(cfg: RunConfig, dataset: Dataset | None = None) -> list[SyntheticObject]:
    if dataset is not None:
        return dataset.objects()
    return [gen_object(object_seed(cfg.seed, 1, i)) for i in range(cfg.data_eval_objects)]
