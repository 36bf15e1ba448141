"""Small latent DDPM denoiser conditioned on a main view and a camera delta.

Layout of the UNet (channels ch1 at full resolution, ch2 at half):

    conv_in ─ s0 ─ enc0a ─ s1 ─ enc0b ─ s2 ─ down ─ s3 ─ enc1a ─ s4 ─ enc1b ─ s5 ─ mid
    dec1a(mid ⊕ s5) ─ dec1b(⊕ s4) ─ dec1c(⊕ s3) ─ up ─ dec0a(⊕ s2) ─ dec0b(⊕ s1) ─ dec0c(⊕ s0) ─ out

Control residuals are added to s0..s5 and to the mid output before they enter
the decoder, so there are seven junctions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from . import layers as L
from . import tensor_core as tc
from .config import RunConfig
from .tensor_core import ParamSet

PREFIX = "backbone."

Residuals = Sequence[torch.Tensor]
Injector = Callable[[torch.Tensor, torch.Tensor], Residuals]


@dataclass(frozen=True)
class BackboneConfig:
    ch1: int = 32
    ch2: int = 64
    temb_dim: int = 128
    tokens: int = 4

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "BackboneConfig":
        return cls(cfg.backbone_ch1, cfg.backbone_ch2, cfg.backbone_temb_dim, cfg.backbone_tokens)

    def junction_channels(self) -> list[int]:
        c1, c2 = self.ch1, self.ch2
        return [c1, c1, c1, c1, c2, c2, c2]

    def junction_shapes(self, grid: int) -> list[tuple[int, int, int]]:
        half = grid // 2
        sizes = [grid, grid, grid, half, half, half, half]
        return [(c, s, s) for c, s in zip(self.junction_channels(), sizes)]


class NoiseSchedule:
    """Linear-beta DDPM schedule; step indices run 1..T.

    The defaults are the usual 1000-step ramp (1e-4 to 0.02) rescaled by 1000/T
    for T = 100, so the last step is close to pure noise.
    """

    def __init__(self, T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2):
        if T < 1:
            raise ValueError("T must be >= 1")
        if not (0 < beta_start < 1 and 0 < beta_end < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64) if T > 1 else \
            torch.tensor([beta_end], dtype=torch.float64)
        self.alphas = 1 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, 0)

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "NoiseSchedule":
        return cls(cfg.backbone_T, cfg.backbone_beta_start, cfg.backbone_beta_end)

    def alpha_bar(self, t: torch.Tensor | int) -> torch.Tensor:
        t = torch.as_tensor(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"diffusion step out of range 1..{self.T}")
        return self.alpha_bars[t - 1]

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else self.alpha_bars[t - 2].item()


# ---------------------------------------------------------------------------
# network


def init_encoder(ps: ParamSet, prefix: str, cfg: BackboneConfig, in_ch: int, gen: torch.Generator):
    c1, c2, te = cfg.ch1, cfg.ch2, cfg.temb_dim
    L.init_linear(ps, prefix + "time1", c1, te, gen)
    L.init_linear(ps, prefix + "time2", te, te, gen)
    L.init_conv(ps, prefix + "conv_in", in_ch, c1, 3, gen)
    L.init_resblock(ps, prefix + "enc0a", c1, c1, gen, te)
    L.init_resblock(ps, prefix + "enc0b", c1, c1, gen, te)
    L.init_conv(ps, prefix + "down", c1, c1, 3, gen)
    L.init_resblock(ps, prefix + "enc1a", c1, c2, gen, te)
    L.init_resblock(ps, prefix + "enc1b", c2, c2, gen, te)
    L.init_resblock(ps, prefix + "mid1", c2, c2, gen, te)
    L.init_context(ps, prefix + "delta_embed", cfg.tokens, c2, gen)
    L.init_attn(ps, prefix + "mid_attn", c2, gen, ctx_dim=c2)
    L.init_resblock(ps, prefix + "mid2", c2, c2, gen, te)


ENCODER_BLOCKS = ("time1", "time2", "conv_in", "enc0a", "enc0b", "down", "enc1a", "enc1b",
                  "mid1", "delta_embed", "mid_attn", "mid2")


def init_backbone(cfg: BackboneConfig, gen: torch.Generator) -> ParamSet:
    c1, c2, te, p = cfg.ch1, cfg.ch2, cfg.temb_dim, PREFIX
    ps = ParamSet()
    init_encoder(ps, p, cfg, 8, gen)
    L.init_resblock(ps, p + "dec1a", 2 * c2, c2, gen, te)
    L.init_resblock(ps, p + "dec1b", 2 * c2, c2, gen, te)
    L.init_resblock(ps, p + "dec1c", c2 + c1, c2, gen, te)
    L.init_upconv(ps, p + "up", c2, c2, gen)
    L.init_resblock(ps, p + "dec0a", c2 + c1, c1, gen, te)
    L.init_resblock(ps, p + "dec0b", 2 * c1, c1, gen, te)
    L.init_resblock(ps, p + "dec0c", 2 * c1, c1, gen, te)
    L.init_norm(ps, p + "out_norm", c1)
    L.init_conv(ps, p + "out", c1, 4, 3, gen)
    return ps


def time_embed(params: ParamSet, prefix: str, cfg: BackboneConfig, t: torch.Tensor) -> torch.Tensor:
    e = L.timestep_embedding(t, cfg.ch1)
    return L.linear(params, prefix + "time2", tc.silu(L.linear(params, prefix + "time1", e)))


def encode(params: ParamSet, prefix: str, cfg: BackboneConfig, x_in: torch.Tensor, t: torch.Tensor,
           delta_embed: torch.Tensor, stem_out: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Encoder + mid block. Returns the seven junction tensors [s0..s5, mid].

    ``stem_out`` replaces ``conv_in(x_in)`` when the caller has its own input stem.
    """
    temb = time_embed(params, prefix, cfg, t)
    s0 = L.conv(params, prefix + "conv_in", x_in) if stem_out is None else stem_out
    s1 = L.resblock(params, prefix + "enc0a", s0, temb)
    s2 = L.resblock(params, prefix + "enc0b", s1, temb)
    s3 = L.conv(params, prefix + "down", s2, stride=2)
    s4 = L.resblock(params, prefix + "enc1a", s3, temb)
    s5 = L.resblock(params, prefix + "enc1b", s4, temb)
    h = L.resblock(params, prefix + "mid1", s5, temb)
    ctx = L.context_tokens(params, prefix + "delta_embed", delta_embed, cfg.tokens)
    h = L.attn(params, prefix + "mid_attn", h, ctx)
    h = L.resblock(params, prefix + "mid2", h, temb)
    return [s0, s1, s2, s3, s4, s5, h]


def predict_eps(params: ParamSet, cfg: BackboneConfig, x_t: torch.Tensor, t: torch.Tensor,
                main_latent: torch.Tensor, delta_embed: torch.Tensor,
                residuals: Residuals | None = None) -> torch.Tensor:
    """Noise prediction for (B, 4, H, W) noisy latents at integer steps ``t`` (B,)."""
    if x_t.shape != main_latent.shape or x_t.ndim != 4 or x_t.shape[1] != 4:
        raise tc.ShapeError("predict_eps", x_t.shape, main_latent.shape)
    p = PREFIX
    temb = time_embed(params, p, cfg, t)
    junctions = encode(params, p, cfg, torch.cat([x_t, main_latent], dim=1), t, delta_embed)
    if residuals is not None:
        if len(residuals) != len(junctions):
            raise tc.ShapeError("predict_eps residuals", (len(residuals),), (len(junctions),))
        junctions = [tc.add(j, r) for j, r in zip(junctions, residuals)]
    s0, s1, s2, s3, s4, s5, h = junctions
    h = L.resblock(params, p + "dec1a", torch.cat([h, s5], 1), temb)
    h = L.resblock(params, p + "dec1b", torch.cat([h, s4], 1), temb)
    h = L.resblock(params, p + "dec1c", torch.cat([h, s3], 1), temb)
    h = L.upconv(params, p + "up", h)
    h = L.resblock(params, p + "dec0a", torch.cat([h, s2], 1), temb)
    h = L.resblock(params, p + "dec0b", torch.cat([h, s1], 1), temb)
    h = L.resblock(params, p + "dec0c", torch.cat([h, s0], 1), temb)
    return L.conv(params, p + "out", tc.silu(L.norm(params, p + "out_norm", h)))


# ---------------------------------------------------------------------------
# diffusion process


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise tc.ShapeError("q_sample", x0.shape, eps.shape)
    ab = schedule.alpha_bar(t).to(x0.dtype)
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def eps_mse(predict: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], schedule: NoiseSchedule,
            x0: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Draw t ~ U{1..T} and eps ~ N(0, 1) per item; MSE between eps and predict(x_t, t)."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(x0.dtype)
    return tc.mse(predict(q_sample(schedule, x0, t, eps), t), eps)


def diffusion_loss(params: ParamSet, cfg: BackboneConfig, schedule: NoiseSchedule, x0: torch.Tensor,
                   main_latent: torch.Tensor, delta_embed: torch.Tensor, gen: torch.Generator,
                   injector: Injector | None = None) -> torch.Tensor:
    def predict(x_t, t):
        res = injector(x_t, t) if injector is not None else None
        return predict_eps(params, cfg, x_t, t, main_latent, delta_embed, res)

    return eps_mse(predict, schedule, x0, gen)


@torch.no_grad()
def ddpm_sample(params: ParamSet, cfg: BackboneConfig, main_latent: torch.Tensor, delta_embed: torch.Tensor,
                schedule: NoiseSchedule, gen: torch.Generator, injector: Injector | None = None,
                clip: float = 1.0, log: Callable[[int, torch.Tensor], None] | None = None) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, 1); the predicted x0 is clipped to [-clip, clip] each step."""
    dtype = main_latent.dtype
    x = torch.randn(main_latent.shape, generator=gen, dtype=torch.float64).to(dtype)
    b = x.shape[0]
    for step in range(schedule.T, 0, -1):
        t = torch.full((b,), step, dtype=torch.long)
        res = injector(x, t) if injector is not None else None
        eps = predict_eps(params, cfg, x, t, main_latent, delta_embed, res)
        ab = schedule.alpha_bars[step - 1].item()
        ab_prev = schedule.alpha_bar_prev(step)
        beta = schedule.betas[step - 1].item()
        x0_hat = ((x - (1 - ab) ** 0.5 * eps) / ab ** 0.5).clamp(-clip, clip)
        mean = (ab_prev ** 0.5 * beta / (1 - ab)) * x0_hat + ((1 - beta) ** 0.5 * (1 - ab_prev) / (1 - ab)) * x
        if step > 1:
            var = beta * (1 - ab_prev) / (1 - ab)
            noise = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
            x = mean + var ** 0.5 * noise
        else:
            x = mean
        if log is not None:
            log(step, x)
    return x
