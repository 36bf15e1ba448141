"""Command-line entry point: ``mvfuse gen-data | train | sample | eval``.

Exit codes: 0 ok, 2 usage or config error, 3 missing prerequisite file,
4 numerical failure. ``TVF_THREADS`` caps torch's intra-op thread count.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import backbone as bb
from . import data as D
from . import fusion as fu
from . import injection as inj
from . import lifting as lf
from . import pipeline as pl
from . import tensor_core as tc
from .camera import CameraPose
from .config import ConfigError, RunConfig, load_config
from .tensor_core import ParamSet

log = logging.getLogger("mvfuse")

EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4
SAMPLE_FORMAT = "mvfuse-sample"
FUSED_FORMAT = "mvfuse-fused"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def parse_pose(text: str, radius: float) -> CameraPose:
    """``az`` or ``az:elev`` in degrees."""
    parts = text.strip().split(":")
    try:
        if len(parts) not in (1, 2) or not all(p.strip() for p in parts):
            raise ValueError
        az = float(parts[0])
        el = float(parts[1]) if len(parts) == 2 else 0.0
    except ValueError:
        raise UsageError(f"bad pose {text!r}: expected AZ or AZ:ELEV in degrees") from None
    if not (math.isfinite(az) and math.isfinite(el)) or abs(el) >= 90.0:
        raise UsageError(f"bad pose {text!r}: elevation must be inside (-90, 90)")
    return CameraPose.from_degrees(az, el, radius)


def parse_pose_list(text: str, radius: float) -> list[CameraPose]:
    items = [t for t in text.split(",")]
    if not text.strip() or any(not t.strip() for t in items):
        raise UsageError(f"bad pose list {text!r}")
    return [parse_pose(t, radius) for t in items]


def parse_counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"bad view-count list {text!r}") from None
    if not counts or any(c not in D.EVAL_INPUT_AZIMUTHS for c in counts):
        raise UsageError(f"view counts must be drawn from 1..4, got {text!r}")
    return counts


def parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        if "=" not in it:
            raise UsageError(f"--set expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    overrides = parse_set(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    log.info("resolved config (hash %s):\n%s", cfg.digest(), cfg.to_text().rstrip())
    return cfg


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise pl.MissingPrerequisite(f"missing prerequisite {path} ({what})")
    return path


def config_for_dataset(cfg: RunConfig, ds: D.Dataset) -> RunConfig:
    """Rendering settings follow the dataset file so training views match the stored ones."""
    return cfg.replace(data_grid=ds.grid, camera_fov_deg=ds.fov_deg, camera_radius=ds.radius)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    n_obj = args.objects if args.objects is not None else cfg.data_train_objects
    n_eval = args.eval_objects if args.eval_objects is not None else cfg.data_eval_objects
    views = args.views if args.views is not None else cfg.data_views
    if n_obj < 1 or n_eval < 0 or views < 1:
        raise UsageError("--objects and --views must be positive, --eval-objects non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_obj), ("eval", n_eval)):
        ds = D.build_dataset(split, cfg.seed, n, views, cfg.data_grid, cfg.camera_fov_deg, cfg.camera_radius)
        D.save_dataset(ds, out / f"{split}.ds")
        log.info("wrote %s (%d objects x %d views)", out / f"{split}.ds", n, views)
    (out / "data.config").write_text(cfg.to_text(), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = D.load_dataset(require(Path(args.data) / "train.ds", "training dataset"))
    cfg = config_for_dataset(cfg, ds)
    out = Path(args.out)
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else out
    kw = {"resume": args.resume, "stop_after": args.steps}
    if args.verbose:
        kw["progress"] = lambda step, v: log.info("stage %d step %d loss %.6f", args.stage, step, v)
    if args.stage == 0:
        res = pl.train_stage0(cfg, ds, out, **kw)
    elif args.stage == 1:
        res = pl.train_stage1(cfg, ds, out, **kw)
    else:
        s0 = require(pl.ckpt_path(ckpt_dir, 0), f"stage-0 {bb.PREFIX} archive")
        s1 = require(pl.ckpt_path(ckpt_dir, 1), f"stage-1 {lf.PREFIX} archive")
        res = pl.train_stage2(cfg, ds, s0, s1, out, **kw)
    log.info("stage %d: %d steps, final loss %.6f, checkpoint %s", args.stage, res.steps,
             res.losses[-1] if res.losses else float("nan"), res.ckpt)
    return 0


def _load_models(cfg: RunConfig, ckpt_dir: Path, backbone_only: bool) -> tuple[ParamSet, ParamSet | None]:
    backbone = ParamSet.load(require(pl.ckpt_path(ckpt_dir, 0), f"stage-0 {bb.PREFIX} archive"))
    stage2 = None
    if not backbone_only:
        stage2 = ParamSet.load(require(pl.ckpt_path(ckpt_dir, 2), f"stage-2 {lf.PREFIX}/{inj.PREFIX} archive"))
    return backbone, stage2


def write_pgm(path: Path, channel: torch.Tensor) -> None:
    """8-bit binary PGM; feature range [-1, 1] maps to 0..255."""
    arr = ((channel.detach().double().clamp(-1, 1).numpy() + 1) * 127.5).round().astype(np.uint8)
    h, w = arr.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    inputs = parse_pose_list(args.views, cfg.camera_radius)
    targets = parse_pose_list(args.target, cfg.camera_radius)
    ckpt_dir = Path(args.ckpt)
    backbone, stage2 = _load_models(cfg, ckpt_dir, args.backbone_only)
    m = pl.Models(cfg)
    seed = args.object_seed if args.object_seed is not None else D.object_seed(cfg.seed, 1, 0)
    obj = D.gen_object(seed)
    lats = [D.render_latent(obj, p, cfg.data_grid, cfg.camera_fov_deg) for p in inputs]
    gen = pl._torch_gen(cfg.seed, 11)

    def step_log(step, x):
        log.info("step %3d  mean %+.4f  std %.4f  absmax %.4f", step, x.mean().item(), x.std().item(),
                 x.abs().max().item())

    pred = pl.sample_views(m, backbone, stage2, [l.grid for l in lats], inputs, targets, gen,
                           step_log if args.verbose else None)
    if not torch.isfinite(pred).all():
        raise tc.NumericalError("sampled latent contains non-finite values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": SAMPLE_FORMAT, "object_seed": str(seed), "config_hash": cfg.digest(),
            "inputs": [p.to_dict() for p in inputs], "targets": [p.to_dict() for p in targets],
            "backbone_only": bool(args.backbone_only)}
    tc.write_envelope(out / "sample.lat", meta, [(f"target{k}", pred[k], {}) for k in range(len(targets))])
    if args.pgm:
        for k in range(len(targets)):
            for c in range(pred.shape[1]):
                write_pgm(out / f"target{k}_c{c}.pgm", pred[k, c])
    if args.dump_fused or args.gating_probe:
        if stage2 is None:
            raise UsageError("--dump-fused and --gating-probe need the stage-2 checkpoint (drop --backbone-only)")
        with torch.no_grad():
            tps = lf.lift_all(stage2, m.lift_cfg, lats, targets[0], cfg.triplane_extent)
            fused = fu.render_fused(stage2, tps, targets[0], m.fuse_cfg)
        if args.dump_fused:
            d = Path(args.dump_fused)
            d.mkdir(parents=True, exist_ok=True)
            tc.write_envelope(d / "fused.lat", {"kind": FUSED_FORMAT, "target": targets[0].to_dict(),
                                                 "config_hash": cfg.digest()},
                              [("fused", fused.grid, {}), ("opacity", fused.opacity, {})])
            if args.pgm:
                write_pgm(d / "opacity.pgm", fused.opacity * 2 - 1)
        if args.gating_probe:
            g = pl._torch_gen(cfg.seed, 12)
            x_t = torch.randn((1, *fused.grid.shape), generator=g, dtype=torch.float64).to(fused.grid.dtype)
            t = torch.tensor([max(1, m.schedule.T // 2)])
            rows = inj.gating_probe(stage2, m.bb_cfg, fused.grid[None], x_t, t, tuple(args.probe_deltas))
            with open(args.gating_probe, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["delta_deg", "mean_residual_norm"])
                for deg, mag in rows:
                    w.writerow([f"{deg:g}", f"{mag:.8f}"])
    log.info("wrote %s", out / "sample.lat")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    counts = parse_counts(args.view_counts)
    ckpt_dir = Path(args.ckpt)
    if args.data:
        ds = D.load_dataset(require(Path(args.data) / "eval.ds", "evaluation dataset"))
        cfg = config_for_dataset(cfg, ds)
        objects = ds.objects()
    else:
        objects = pl.eval_objects(cfg)
    if args.limit is not None:
        objects = objects[:args.limit]
    if not objects:
        raise UsageError("evaluation set is empty")
    backbone, stage2 = _load_models(cfg, ckpt_dir, False)
    stage1 = None
    if args.recon:
        stage1 = ParamSet.load(require(pl.ckpt_path(ckpt_dir, 1), f"stage-1 {lf.PREFIX} archive"))
    report = pl.evaluate(cfg, backbone, stage2, objects, counts, stage1=stage1, baseline=not args.no_baseline)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    log.info("evaluated %d objects in %.1f s", len(objects), report.runtime_s)
    for c in report.conditions():
        log.info("%-9s psnr %.3f  ssim %.4f  mse %.5f", c, report.mean(c), report.mean(c, "ssim"),
                 report.mean(c, "mse"))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="mvfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic train/eval datasets")
    g.add_argument("--objects", type=int, help="training objects (default: data.train_objects)")
    g.add_argument("--eval-objects", type=int, help="held-out objects (default: data.eval_objects)")
    g.add_argument("--views", type=int, help="stored views per object (default: data.views)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--data", required=True, help="directory holding train.ds")
    t.add_argument("--out", required=True)
    t.add_argument("--ckpt-dir", help="where stage-2 finds stage0/stage1 checkpoints (default: --out)")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--steps", type=int, help="stop after this many total steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="sample target latents for one synthetic object")
    s.add_argument("--ckpt", required=True, help="directory with stage0.ckpt and stage2.ckpt")
    s.add_argument("--views", required=True, help="input poses, e.g. 0,90,180 or 0:10,180:-5")
    s.add_argument("--target", required=True, help="target pose(s), same syntax")
    s.add_argument("--object-seed", type=int, help="object to render inputs from (default: first eval object)")
    s.add_argument("--out", required=True)
    s.add_argument("--backbone-only", action="store_true", help="skip injection (single-view baseline)")
    s.add_argument("--pgm", action="store_true", help="also write one PGM preview per channel")
    s.add_argument("--dump-fused", metavar="DIR", help="write the fused latent and opacity map")
    s.add_argument("--gating-probe", metavar="CSV", help="write residual magnitude vs view delta")
    s.add_argument("--probe-deltas", type=float, nargs="+", default=[0.0, 45.0, 90.0, 135.0, 180.0])
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="held-out view-count sweep")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="directory holding eval.ds (default: regenerate from the config seed)")
    e.add_argument("--view-counts", default="1,2,3,4")
    e.add_argument("--limit", type=int, help="evaluate only the first N objects")
    e.add_argument("--recon", action="store_true", help="include stage-1 reconstruction MSE rows")
    e.add_argument("--no-baseline", action="store_true")
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=cmd_eval)
    return p


def _set_threads() -> None:
    raw = os.environ.get("TVF_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"TVF_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise UsageError("TVF_THREADS must be >= 1")
        torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        _set_threads()
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"mvfuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (pl.MissingPrerequisite, FileNotFoundError) as e:
        print(f"mvfuse: {e}", file=sys.stderr)
        return EXIT_MISSING
    except tc.NumericalError as e:
        print(f"mvfuse: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # bad or version-mismatched input files, checkpoint/config shape disagreements
        print(f"mvfuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
