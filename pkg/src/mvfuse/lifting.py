"""Target-aware 2D-to-3D lifting: latent image + camera delta -> tri-plane."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import layers as L
from . import tensor_core as tc
from .camera import CameraPose, ViewDelta, embed_delta, view_delta
from .config import RunConfig
from .tensor_core import ParamSet
from .triplane import TriPlane

PREFIX = "lift."


@dataclass
class LatentImage:
    grid: torch.Tensor  # (4, H, W)
    pose: CameraPose

    def __post_init__(self):
        g = self.grid
        if g.ndim != 3 or g.shape[0] != 4 or g.shape[1] != g.shape[2]:
            raise tc.ShapeError("LatentImage", g.shape, (4, "H", "H"))


@dataclass(frozen=True)
class LiftingConfig:
    dim: int = 32
    tokens: int = 4
    P: int = 16
    C: int = 8

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "LiftingConfig":
        return cls(cfg.lift_dim, cfg.lift_tokens, cfg.triplane_P, cfg.triplane_C)


def init_lifting(cfg: LiftingConfig, gen: torch.Generator) -> ParamSet:
    d, p = cfg.dim, PREFIX
    ps = ParamSet()
    L.init_conv(ps, p + "stem", 4, d, 3, gen)
    L.init_resblock(ps, p + "enc0a", d, d, gen)
    L.init_resblock(ps, p + "enc0b", d, d, gen)
    L.init_conv(ps, p + "down", d, 2 * d, 3, gen)
    L.init_resblock(ps, p + "enc1a", 2 * d, 2 * d, gen)
    L.init_resblock(ps, p + "enc1b", 2 * d, 2 * d, gen)
    L.init_attn(ps, p + "self_attn", 2 * d, gen)
    L.init_context(ps, p + "delta_embed", cfg.tokens, 2 * d, gen)
    L.init_attn(ps, p + "cross_attn", 2 * d, gen, ctx_dim=2 * d)
    L.init_upconv(ps, p + "up", 2 * d, d, gen)
    L.init_resblock(ps, p + "dec0", d, d, gen)
    L.init_norm(ps, p + "head_norm", d)
    L.init_conv(ps, p + "head", d, 3 * cfg.C, 3, gen)
    return ps


def lift_batch(params: ParamSet, cfg: LiftingConfig, grids: torch.Tensor, delta_embeds: torch.Tensor) -> torch.Tensor:
    """(B, 4, H, H) latents and (B, 4) delta embeddings -> (B, 3, C, P, P) planes."""
    if grids.ndim != 4 or grids.shape[1] != 4 or grids.shape[2] != grids.shape[3] or grids.shape[2] % 2:
        raise tc.ShapeError("lift", grids.shape, ("B", 4, "H", "H"))
    if delta_embeds.shape != (grids.shape[0], 4):
        raise tc.ShapeError("lift", grids.shape, delta_embeds.shape)
    p = PREFIX
    h = L.conv(params, p + "stem", grids)
    h = L.resblock(params, p + "enc0a", h)
    skip = L.resblock(params, p + "enc0b", h)
    h = L.conv(params, p + "down", skip, stride=2)
    h = L.resblock(params, p + "enc1a", h)
    h = L.resblock(params, p + "enc1b", h)
    h = L.attn(params, p + "self_attn", h)
    ctx = L.context_tokens(params, p + "delta_embed", delta_embeds, cfg.tokens)
    h = L.attn(params, p + "cross_attn", h, ctx)
    h = tc.add(L.upconv(params, p + "up", h), skip)
    h = L.resblock(params, p + "dec0", h)
    out = L.conv(params, p + "head", tc.silu(L.norm(params, p + "head_norm", h)))
    if out.shape[-1] != cfg.P:
        out = F.interpolate(out, size=(cfg.P, cfg.P), mode="bilinear", align_corners=True)
    b = grids.shape[0]
    return out.reshape(b, 3, cfg.C, cfg.P, cfg.P)


def lift(params: ParamSet, cfg: LiftingConfig, x: LatentImage, delta: ViewDelta, extent: float = 1.0) -> TriPlane:
    planes = lift_batch(params, cfg, x.grid[None], embed_delta(delta)[None].to(x.grid.dtype))[0]
    return TriPlane(planes, x.pose, extent)


def lift_all(params: ParamSet, cfg: LiftingConfig, views: list[LatentImage], target: CameraPose,
             extent: float = 1.0) -> list[TriPlane]:
    if not views:
        raise ValueError("lift_all needs at least one input view")
    grids = torch.stack([v.grid for v in views])
    embeds = torch.stack([embed_delta(view_delta(v.pose, target)) for v in views]).to(grids.dtype)
    planes = lift_batch(params, cfg, grids, embeds)
    return [TriPlane(planes[i], v.pose, extent) for i, v in enumerate(views)]
