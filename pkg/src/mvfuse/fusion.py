"""Composited volume rendering of several input-view tri-planes into one target-view latent."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from . import layers as L
from . import tensor_core as tc
from .camera import CameraPose, pose_to_extrinsics, ray_box_intersect, target_rays, view_delta
from .config import RunConfig
from .tensor_core import ParamSet
from .triplane import TriPlane, decode_sigma_payload, query_frame_points

PREFIX = "fuse."
SCENE_EXTENT = 1.0


class DegenerateWeightsWarning(UserWarning):
    """Every input view sits exactly opposite the target; weights fall back to uniform."""


@dataclass(frozen=True)
class FusionConfig:
    samples_per_ray: int = 32
    grid: int = 16
    fov_deg: float = 50.0
    decode_before_aggregate: bool = False

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "FusionConfig":
        return cls(cfg.fusion_samples, cfg.data_grid, cfg.camera_fov_deg, cfg.fusion_decode_before_aggregate)


@dataclass
class FusedLatent:
    grid: torch.Tensor  # (4, H, W)
    target_pose: CameraPose
    opacity: torch.Tensor | None = None  # (H, W)


def init_readout(payload_channels: int, gen: torch.Generator) -> ParamSet:
    ps = ParamSet()
    L.init_linear(ps, PREFIX + "readout", payload_channels, 4, gen, std=0.2)
    return ps


def view_weight(d_theta: float) -> float:
    return (math.cos(d_theta) + 1) / 2


def normalize_weights(lambdas: list[float]) -> list[float]:
    total = sum(lambdas)
    if total <= 0:
        warnings.warn("all input views are opposite the target; using uniform weights", DegenerateWeightsWarning,
                      stacklevel=2)
        return [1.0 / len(lambdas)] * len(lambdas)
    return [lam / total for lam in lambdas]


def view_weights_tensor(d_thetas: torch.Tensor) -> torch.Tensor:
    """Normalized weights for (B, n) azimuth deltas, with the uniform fallback per row."""
    lam = (torch.cos(d_thetas) + 1) / 2
    total = lam.sum(dim=-1, keepdim=True)
    degenerate = total <= 0
    if degenerate.any():
        warnings.warn("all input views are opposite the target; using uniform weights", DegenerateWeightsWarning,
                      stacklevel=2)
    uniform = torch.full_like(lam, 1.0 / lam.shape[-1])
    return torch.where(degenerate, uniform, lam / torch.where(degenerate, torch.ones_like(total), total))


def aggregate_point(features: torch.Tensor, weights_norm: torch.Tensor) -> torch.Tensor:
    """Convex combination over the view axis: (..., n, C) x (..., n) -> (..., C)."""
    if features.shape[:-1] != weights_norm.shape:
        raise tc.ShapeError("aggregate_point", features.shape, weights_norm.shape)
    return (features * weights_norm.unsqueeze(-1)).sum(dim=-2)


def integrate_ray(sigmas: torch.Tensor, payloads: torch.Tensor, deltas: torch.Tensor
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Discrete volume rendering along the last sample axis.

    sigmas, deltas: (..., S); payloads: (..., S, D). Returns (rendered (..., D), opacity (...)).
    """
    if sigmas.shape != deltas.shape or payloads.shape[:-1] != sigmas.shape:
        raise tc.ShapeError("integrate_ray", sigmas.shape, payloads.shape, deltas.shape)
    tau = sigmas * deltas
    alpha = 1 - torch.exp(-tau)
    # T_j = prod_{k<j} (1 - alpha_k) = exp(-sum_{k<j} tau_k)
    trans = torch.exp(-(torch.cumsum(tau, dim=-1) - tau))
    w = trans * alpha
    # sum_j w_j telescopes to 1 - T_final; the closed form stays inside [0, 1] under rounding
    opacity = -torch.expm1(-tau.sum(dim=-1))
    return (w.unsqueeze(-1) * payloads).sum(dim=-2), opacity


def transmittance(sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    tau = sigmas * deltas
    return torch.exp(-(torch.cumsum(tau, dim=-1) - tau))


def sample_ray_points(origins: torch.Tensor, dirs: torch.Tensor, samples: int,
                      gen: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stratified points inside the scene cube.

    origins/dirs (..., 3). Returns points (..., S, 3) and step lengths (..., S); rays
    that miss the cube get zero step lengths and so render exact zeros.
    """
    t0, t1, hit = ray_box_intersect(origins, dirs, SCENE_EXTENT)
    length = torch.where(hit, t1 - t0, torch.zeros_like(t0))
    if gen is None:
        u = (torch.arange(samples, dtype=origins.dtype) + 0.5).expand(*origins.shape[:-1], samples)
    else:
        jitter = torch.rand(*origins.shape[:-1], samples, generator=gen, dtype=torch.float64).to(origins.dtype)
        u = torch.arange(samples, dtype=origins.dtype) + jitter
    t = t0.unsqueeze(-1) + u / samples * length.unsqueeze(-1)
    pts = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)
    deltas = (length / samples).unsqueeze(-1).expand_as(t)
    return pts, deltas


def readout(params: ParamSet, payload: torch.Tensor) -> torch.Tensor:
    return L.linear(params, PREFIX + "readout", payload)


def render_batch(params: ParamSet, planes: torch.Tensor, rotations: torch.Tensor, weights: torch.Tensor,
                 origins: torch.Tensor, dirs: torch.Tensor, cfg: FusionConfig, extent: float = 1.0,
                 gen: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched renderer.

    planes (B, n, 3, C, P, P); rotations (B, n, 3, 3) world->view-frame; weights (B, n)
    normalized; origins/dirs (B, H, W, 3). Returns latents (B, 4, H, W) and opacity (B, H, W).
    """
    b, n = planes.shape[:2]
    if rotations.shape != (b, n, 3, 3) or weights.shape != (b, n) or origins.shape[0] != b:
        raise tc.ShapeError("render_fused", planes.shape, rotations.shape, weights.shape, origins.shape)
    h, w = origins.shape[1:3]
    pts, deltas = sample_ray_points(origins, dirs, cfg.samples_per_ray, gen)  # (B,H,W,S,3)
    flat = pts.reshape(b, 1, -1, 3)
    local = torch.matmul(flat, rotations.transpose(-1, -2)) / extent  # (B, n, M, 3)
    feats = query_frame_points(planes, local)  # (B, n, M, C)
    feats = feats.transpose(1, 2)  # (B, M, n, C)
    wts = weights[:, None, :].expand(b, feats.shape[1], n)
    if cfg.decode_before_aggregate:
        sig_v, pay_v = decode_sigma_payload(feats)
        sigma = (sig_v * wts).sum(-1)
        payload = aggregate_point(pay_v, wts)
    else:
        sigma, payload = decode_sigma_payload(aggregate_point(feats, wts))
    s = cfg.samples_per_ray
    sigma = sigma.reshape(b, h, w, s)
    payload = payload.reshape(b, h, w, s, -1)
    rendered, opacity = integrate_ray(sigma, payload, deltas)
    out = readout(params, rendered)  # (B, H, W, 4)
    return tc._finite("render_fused", out.permute(0, 3, 1, 2)), opacity


def frame_rotations(poses: list[CameraPose], dtype: torch.dtype) -> torch.Tensor:
    return torch.stack([pose_to_extrinsics(p, dtype)[0] for p in poses])


def render_fused(params: ParamSet, tps: list[TriPlane], target: CameraPose, cfg: FusionConfig,
                 gen: torch.Generator | None = None) -> FusedLatent:
    if not tps:
        raise ValueError("render_fused needs at least one tri-plane")
    dtype = tps[0].planes.dtype
    planes = torch.stack([tp.planes for tp in tps])[None]
    rots = frame_rotations([tp.frame for tp in tps], dtype)[None]
    d_thetas = torch.tensor([[view_delta(tp.frame, target).d_theta for tp in tps]], dtype=dtype)
    weights = view_weights_tensor(d_thetas)
    rays = target_rays(target, cfg.grid, cfg.fov_deg, dtype)
    grid, opacity = render_batch(params, planes, rots, weights, rays.origins[None], rays.directions[None], cfg,
                                 tps[0].extent, gen)
    return FusedLatent(grid[0], target, opacity[0])
