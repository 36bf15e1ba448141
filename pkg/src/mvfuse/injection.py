"""Trainable encoder copy that turns a fused target-view latent into decoder residuals."""

from __future__ import annotations

import math

import torch

from . import backbone as bb
from . import layers as L
from . import tensor_core as tc
from .backbone import BackboneConfig
from .tensor_core import ParamSet

PREFIX = "inject."
CLONED_BLOCKS = tuple(b for b in bb.ENCODER_BLOCKS if b != "conv_in")
N_LINKS = 7


def init_from_backbone(backbone: ParamSet, cfg: BackboneConfig, gen: torch.Generator,
                       use_xt: bool = True) -> ParamSet:
    ps = ParamSet()
    for name, t in backbone.tensors.items():
        block = name[len(bb.PREFIX):].split(".", 1)[0]
        if block in CLONED_BLOCKS:
            ps.add(PREFIX + name[len(bb.PREFIX):], t.detach().clone())
    L.init_conv(ps, PREFIX + "stem", 8 if use_xt else 4, cfg.ch1, 3, gen)
    for i, ch in enumerate(cfg.junction_channels()):
        L.init_zero_conv(ps, f"{PREFIX}link{i}", ch)
    return ps


def uses_xt(params: ParamSet) -> bool:
    return params[PREFIX + "stem.weight"].shape[1] == 8


def check_against_backbone(params: ParamSet, cfg: BackboneConfig) -> None:
    """Residual link shapes must line up with the backbone junctions."""
    chans = cfg.junction_channels()
    for i, ch in enumerate(chans):
        w = params[f"{PREFIX}link{i}.weight"]
        if w.shape != (ch, ch, 1, 1):
            raise tc.ShapeError(f"inject.link{i}", w.shape, (ch, ch, 1, 1))
    if f"{PREFIX}link{len(chans)}.weight" in params:
        raise tc.ShapeError("inject links", (len(chans) + 1,), (len(chans),))


def compute_residuals(params: ParamSet, cfg: BackboneConfig, f_t: torch.Tensor, x_t: torch.Tensor,
                      t: torch.Tensor, delta_embed: torch.Tensor) -> list[torch.Tensor]:
    if f_t.ndim != 4 or f_t.shape[1] != 4 or f_t.shape != x_t.shape:
        raise tc.ShapeError("compute_residuals", f_t.shape, x_t.shape)
    cond = torch.cat([f_t, x_t], dim=1) if uses_xt(params) else f_t
    stem = L.conv(params, PREFIX + "stem", cond)
    junctions = bb.encode(params, PREFIX, cfg, cond, t, delta_embed, stem_out=stem)
    return [L.conv(params, f"{PREFIX}link{i}", j) for i, j in enumerate(junctions)]


def make_injector(params: ParamSet, cfg: BackboneConfig, f_t: torch.Tensor, delta_embed: torch.Tensor):
    def injector(x_t, t):
        return compute_residuals(params, cfg, f_t, x_t, t, delta_embed)
    return injector


def residual_magnitude(residuals: list[torch.Tensor]) -> float:
    """Mean over junctions of the per-item L2 norm, averaged over the batch."""
    norms = [r.flatten(1).norm(dim=1).mean().item() for r in residuals]
    return sum(norms) / len(norms)


@torch.no_grad()
def gating_probe(params: ParamSet, cfg: BackboneConfig, f_t: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
                 deltas_deg: tuple[float, ...] = (0.0, 90.0, 180.0)) -> list[tuple[float, float]]:
    """Residual magnitude as the main->target azimuth delta is swept (elevation/radius deltas zero)."""
    out = []
    for deg in deltas_deg:
        emb = torch.tensor([[math.radians(deg), 0.0, 1.0, 0.0]], dtype=f_t.dtype).expand(f_t.shape[0], 4)
        out.append((deg, residual_magnitude(compute_residuals(params, cfg, f_t, x_t, t, emb))))
    return out
