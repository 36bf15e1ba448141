"""Procedural objects, a first-hit latent renderer, and view sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc
from .camera import CameraPose, target_rays
from .lifting import LatentImage

BOUND = 0.8
MARCH_STEP = 2.0 / 64
DATASET_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" | "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # box half-extents; sphere uses size[0] as radius
    feature: tuple[float, float, float, float]

    def mirrored(self, axis: int) -> "Primitive":
        c = list(self.center)
        c[axis] = -c[axis]
        return Primitive(self.kind, tuple(c), self.size, self.feature)

    def matches(self, other: "Primitive", tol: float = 1e-9) -> bool:
        return (self.kind == other.kind
                and np.allclose(self.center, other.center, atol=tol)
                and np.allclose(self.size, other.size, atol=tol)
                and np.allclose(self.feature, other.feature, atol=tol))


@dataclass(frozen=True)
class SyntheticObject:
    primitives: tuple[Primitive, ...]
    seed: int

    def is_asymmetric(self) -> bool:
        """True when mirroring about each of the x=0, y=0, z=0 planes changes the object."""
        for axis in range(3):
            mirrored = [p.mirrored(axis) for p in self.primitives]
            if all(any(m.matches(q) for q in self.primitives) for m in mirrored):
                return False
        return True


@dataclass
class ViewSet:
    seed: int
    poses: list[CameraPose]
    latents: list[LatentImage] = field(default_factory=list)

    def __post_init__(self):
        if self.latents and len(self.latents) != len(self.poses):
            raise ValueError("ViewSet poses and latents differ in length")


@dataclass
class TrainingSample:
    inputs: list[LatentImage]  # front, back, random
    target: LatentImage


def object_seed(base_seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, split, index]).generate_state(1, np.uint64)[0])


def _random_primitive(rng: np.random.Generator, kind: str, center=None, max_half: float = 0.35) -> Primitive:
    half = rng.uniform(0.12, max_half, size=3)
    if kind == "sphere":
        half = np.full(3, half[0])
    if center is None:
        lim = BOUND - half
        center = rng.uniform(-lim, lim)
    feature = rng.uniform(-1.0, 1.0, size=4)
    return Primitive(kind, tuple(float(v) for v in center), tuple(float(v) for v in half),
                     tuple(float(v) for v in feature))


def gen_object(seed: int) -> SyntheticObject:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    # marker: small primitive pushed away from every coordinate plane
    signs = rng.choice([-1.0, 1.0], size=3)
    marker_center = signs * rng.uniform(0.35, 0.55, size=3)
    prims = [_random_primitive(rng, "box" if rng.random() < 0.5 else "sphere", marker_center, max_half=0.2)]
    for _ in range(n - 1):
        prims.append(_random_primitive(rng, "box" if rng.random() < 0.5 else "sphere"))
    obj = SyntheticObject(tuple(prims), seed)
    if not obj.is_asymmetric():  # pragma: no cover - measure-zero with continuous features
        raise RuntimeError(f"seed {seed} produced a mirror-symmetric object")
    return obj


def _inside(prims: tuple[Primitive, ...], pts: np.ndarray) -> np.ndarray:
    """(..., 3) points -> (..., n_prims) containment mask."""
    masks = []
    for p in prims:
        d = pts - np.asarray(p.center)
        if p.kind == "box":
            masks.append((np.abs(d) <= np.asarray(p.size)).all(axis=-1))
        else:
            masks.append((d * d).sum(axis=-1) <= p.size[0] ** 2)
    return np.stack(masks, axis=-1)


def _march_steps(near: float, far: float) -> np.ndarray:
    n_steps = int(math.ceil((far - near) / MARCH_STEP)) + 1
    return near + MARCH_STEP * np.arange(n_steps)


def _to_latent(out: np.ndarray, pose: CameraPose) -> LatentImage:
    grid_t = torch.from_numpy(out.transpose(2, 0, 1).astype(np.float32)).to(tc.default_dtype())
    return LatentImage(grid_t, pose)


def render_latent_march(obj: SyntheticObject, pose: CameraPose, grid: int = 16, fov_deg: float = 50.0
                        ) -> LatentImage:
    """Brute-force fixed-step march; reference for :func:`render_latent`."""
    rays = target_rays(pose, grid, fov_deg, torch.float64)
    out = np.zeros((grid, grid, 4))
    if obj.primitives:
        o, d = rays.origins.numpy(), rays.directions.numpy()
        ts = _march_steps(rays.near, rays.far)
        pts = o[:, :, None, :] + ts[None, None, :, None] * d[:, :, None, :]
        inside = _inside(obj.primitives, pts)  # (H, W, K, P)
        any_hit = inside.any(axis=-1)
        first_k = any_hit.argmax(axis=-1)
        at_k = np.take_along_axis(inside, first_k[:, :, None, None], axis=2)[:, :, 0, :]
        feats = np.asarray([p.feature for p in obj.primitives])
        out = np.where(any_hit.any(axis=-1)[..., None], feats[at_k.argmax(axis=-1)], 0.0)
    return _to_latent(out, pose)


def _first_step_inside(p: Primitive, o: np.ndarray, d: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Index of the first march step inside ``p`` per ray, or len(ts) if none."""
    c = np.asarray(p.center)
    oc = o - c
    if p.kind == "box":
        h = np.asarray(p.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-h - oc) / d
            t1 = (h - oc) / d
        parallel = d == 0
        outside_slab = parallel & (np.abs(oc) > h)
        t0 = np.where(parallel, -np.inf, t0)
        t1 = np.where(parallel, np.inf, t1)
        t_in = np.minimum(t0, t1).max(axis=-1)
        t_out = np.maximum(t0, t1).min(axis=-1)
        t_out = np.where(outside_slab.any(axis=-1), -np.inf, t_out)
    else:
        b = (oc * d).sum(-1)
        disc = b * b - ((oc * oc).sum(-1) - p.size[0] ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t_in = np.where(disc >= 0, -b - root, np.inf)
        t_out = np.where(disc >= 0, -b + root, -np.inf)
    near, n = ts[0], len(ts)
    k = np.ceil((t_in - near) / MARCH_STEP - 1e-9)
    k = np.clip(np.nan_to_num(k, nan=n, posinf=n, neginf=0), 0, n).astype(np.int64)
    # confirm against the exact containment test around the analytic entry step
    result = np.full(k.shape, n)
    for dk in (-1, 0, 1):
        kk = np.clip(k + dk, 0, n - 1)
        pts = o + ts[kk][..., None] * d
        ok = _inside((p,), pts)[..., 0] & (k + dk >= 0) & (k + dk < n) & (ts[kk] <= t_out + 1e-9)
        result = np.where(ok & (kk < result), kk, result)
    return result


def render_latent(obj: SyntheticObject, pose: CameraPose, grid: int = 16, fov_deg: float = 50.0) -> LatentImage:
    """First-hit rendering on the fixed-step march grid.

    Each pixel takes the feature of the first primitive containing a march sample
    (step 2/64 from the near bound), ties going to the earlier primitive; misses are
    zero. Entry steps are found analytically instead of testing every sample.
    """
    rays = target_rays(pose, grid, fov_deg, torch.float64)
    out = np.zeros((grid, grid, 4))
    if obj.primitives:
        o, d = rays.origins.numpy(), rays.directions.numpy()
        ts = _march_steps(rays.near, rays.far)
        firsts = np.stack([_first_step_inside(p, o, d, ts) for p in obj.primitives], axis=-1)  # (H, W, P)
        best = firsts.argmin(axis=-1)
        hit = firsts.min(axis=-1) < len(ts)
        feats = np.asarray([p.feature for p in obj.primitives])
        out = np.where(hit[..., None], feats[best], 0.0)
    return _to_latent(out, pose)


def _pose(theta_deg: float, phi_deg: float, radius: float) -> CameraPose:
    return CameraPose.from_degrees(theta_deg % 360.0, phi_deg, radius)


def sample_training_poses(rng: np.random.Generator, elev_deg: float = 30.0, radius: float = 2.0
                          ) -> tuple[list[CameraPose], CameraPose]:
    """Front, back (front + 180 deg), one random input pose, and an independent target pose."""
    th0 = rng.uniform(0.0, 360.0)
    ph0 = rng.uniform(-elev_deg, elev_deg)
    front = _pose(th0, ph0, radius)
    back = _pose(th0 + 180.0, ph0, radius)
    rand = _pose(rng.uniform(0.0, 360.0), rng.uniform(-elev_deg, elev_deg), radius)
    target = _pose(rng.uniform(0.0, 360.0), rng.uniform(-elev_deg, elev_deg), radius)
    return [front, back, rand], target


def sample_training_views(obj: SyntheticObject, rng: np.random.Generator, grid: int = 16, fov_deg: float = 50.0,
                          elev_deg: float = 30.0, radius: float = 2.0) -> TrainingSample:
    inputs, target = sample_training_poses(rng, elev_deg, radius)
    return TrainingSample([render_latent(obj, p, grid, fov_deg) for p in inputs],
                          render_latent(obj, target, grid, fov_deg))


EVAL_INPUT_AZIMUTHS = {1: (0.0,), 2: (0.0, 180.0), 3: (0.0, 90.0, 180.0), 4: (0.0, 90.0, 180.0, 270.0)}


def eval_poses(n: int, n_targets: int = 8, radius: float = 2.0) -> tuple[list[CameraPose], list[CameraPose]]:
    if n not in EVAL_INPUT_AZIMUTHS:
        raise ValueError(f"eval view count must be 1..4, got {n}")
    inputs = [_pose(a, 0.0, radius) for a in EVAL_INPUT_AZIMUTHS[n]]
    step = 360.0 / n_targets
    targets = [_pose(22.5 + step * k, 0.0, radius) for k in range(n_targets)]
    return inputs, targets


def eval_views(obj: SyntheticObject, n: int, grid: int = 16, fov_deg: float = 50.0, n_targets: int = 8,
               radius: float = 2.0) -> tuple[ViewSet, ViewSet]:
    """Input views per the fixed sweep protocol and held-out targets at 22.5 + k*45 deg."""
    inputs, targets = eval_poses(n, n_targets, radius)
    return (ViewSet(obj.seed, inputs, [render_latent(obj, p, grid, fov_deg) for p in inputs]),
            ViewSet(obj.seed, targets, [render_latent(obj, p, grid, fov_deg) for p in targets]))


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    split: str
    seeds: list[int]
    grid: int
    fov_deg: float
    radius: float
    views: list[ViewSet]

    def objects(self) -> list[SyntheticObject]:
        return [gen_object(s) for s in self.seeds]


def build_dataset(split: str, base_seed: int, n_objects: int, n_views: int, grid: int = 16, fov_deg: float = 50.0,
                  radius: float = 2.0) -> Dataset:
    split_id = {"train": 0, "eval": 1}[split]
    seeds = [object_seed(base_seed, split_id, i) for i in range(n_objects)]
    poses = [_pose(360.0 * k / n_views, 0.0, radius) for k in range(n_views)]
    views = []
    for s in seeds:
        obj = gen_object(s)
        views.append(ViewSet(s, poses, [render_latent(obj, p, grid, fov_deg) for p in poses]))
    return Dataset(split, seeds, grid, fov_deg, radius, views)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    meta = {
        "kind": "dataset", "dataset_version": DATASET_VERSION, "split": ds.split, "seeds": [str(s) for s in ds.seeds],
        "grid": ds.grid, "fov_deg": ds.fov_deg, "radius": ds.radius, "layout": "CHW",
        "poses": [[p.to_dict() for p in vs.poses] for vs in ds.views],
    }
    entries = [(f"obj{i}.view{j}", lat.grid, {}) for i, vs in enumerate(ds.views) for j, lat in enumerate(vs.latents)]
    tc.write_envelope(path, meta, entries)


def load_dataset(path: str | Path) -> Dataset:
    meta, entries = tc.read_envelope(path)
    if meta.get("kind") != "dataset" or meta.get("dataset_version") != DATASET_VERSION:
        raise ValueError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    arrays = {e["name"]: a for e, a in entries}
    views = []
    for i, (seed, pose_dicts) in enumerate(zip(meta["seeds"], meta["poses"])):
        poses = [CameraPose.from_dict(d) for d in pose_dicts]
        lats = [LatentImage(torch.from_numpy(arrays[f"obj{i}.view{j}"].copy()), p) for j, p in enumerate(poses)]
        views.append(ViewSet(int(seed), poses, lats))
    return Dataset(meta["split"], [int(s) for s in meta["seeds"]], meta["grid"], meta["fov_deg"], meta["radius"],
                   views)
