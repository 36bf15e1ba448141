"""Functional network blocks over a ParamSet.

Each block has an ``init_*`` that registers its entries under a name prefix and
a forward function that reads them back. Activations are (B, C, H, W).
"""

from __future__ import annotations

import math

import torch

from . import tensor_core as tc
from .tensor_core import ParamSet


def trunc_normal(shape, gen: torch.Generator, std: float = 0.02) -> torch.Tensor:
    t = torch.empty(shape, dtype=tc.default_dtype())
    return torch.nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)


def _zeros(shape) -> torch.Tensor:
    return torch.zeros(shape, dtype=tc.default_dtype())


def groups_for(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def init_conv(ps: ParamSet, name: str, cin: int, cout: int, k: int, gen: torch.Generator, std: float = 0.02):
    ps.add(f"{name}.weight", trunc_normal((cout, cin, k, k), gen, std))
    ps.add(f"{name}.bias", _zeros(cout))


def conv(ps: ParamSet, name: str, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
    return tc.conv2d(x, ps[f"{name}.weight"], ps[f"{name}.bias"], stride=stride)


def init_zero_conv(ps: ParamSet, name: str, ch: int):
    ps.add(f"{name}.weight", _zeros((ch, ch, 1, 1)))
    ps.add(f"{name}.bias", _zeros(ch))


def init_upconv(ps: ParamSet, name: str, cin: int, cout: int, gen: torch.Generator, std: float = 0.02):
    ps.add(f"{name}.weight", trunc_normal((cin, cout, 4, 4), gen, std))
    ps.add(f"{name}.bias", _zeros(cout))


def upconv(ps: ParamSet, name: str, x: torch.Tensor) -> torch.Tensor:
    return tc.conv_transpose2d(x, ps[f"{name}.weight"], ps[f"{name}.bias"])


def init_linear(ps: ParamSet, name: str, din: int, dout: int, gen: torch.Generator, std: float = 0.02):
    ps.add(f"{name}.weight", trunc_normal((dout, din), gen, std))
    ps.add(f"{name}.bias", _zeros(dout))


def linear(ps: ParamSet, name: str, x: torch.Tensor) -> torch.Tensor:
    return tc.linear(x, ps[f"{name}.weight"], ps[f"{name}.bias"])


def init_norm(ps: ParamSet, name: str, ch: int):
    ps.add(f"{name}.gamma", torch.ones(ch, dtype=tc.default_dtype()))
    ps.add(f"{name}.beta", _zeros(ch))


def norm(ps: ParamSet, name: str, x: torch.Tensor) -> torch.Tensor:
    return tc.group_norm(x, groups_for(x.shape[1]), ps[f"{name}.gamma"], ps[f"{name}.beta"])


def init_resblock(ps: ParamSet, name: str, cin: int, cout: int, gen: torch.Generator,
                  temb_dim: int | None = None, std: float = 0.02):
    init_norm(ps, f"{name}.norm1", cin)
    init_conv(ps, f"{name}.conv1", cin, cout, 3, gen, std)
    if temb_dim:
        init_linear(ps, f"{name}.temb", temb_dim, cout, gen, std)
    init_norm(ps, f"{name}.norm2", cout)
    init_conv(ps, f"{name}.conv2", cout, cout, 3, gen, std)
    if cin != cout:
        init_conv(ps, f"{name}.skip", cin, cout, 1, gen, std)


def resblock(ps: ParamSet, name: str, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
    h = conv(ps, f"{name}.conv1", tc.silu(norm(ps, f"{name}.norm1", x)))
    if temb is not None:
        t = linear(ps, f"{name}.temb", tc.silu(temb))
        h = tc.add(h, t[:, :, None, None].expand_as(h))
    h = conv(ps, f"{name}.conv2", tc.silu(norm(ps, f"{name}.norm2", h)))
    skip = conv(ps, f"{name}.skip", x) if f"{name}.skip.weight" in ps else x
    return tc.add(skip, h)


def init_attn(ps: ParamSet, name: str, ch: int, gen: torch.Generator, ctx_dim: int | None = None,
              std: float = 0.02):
    """Self-attention when ``ctx_dim`` is None, otherwise cross-attention onto context tokens."""
    init_norm(ps, f"{name}.norm", ch)
    init_linear(ps, f"{name}.q", ch, ch, gen, std)
    init_linear(ps, f"{name}.k", ctx_dim or ch, ch, gen, std)
    init_linear(ps, f"{name}.v", ctx_dim or ch, ch, gen, std)
    init_linear(ps, f"{name}.out", ch, ch, gen, std)


def attn(ps: ParamSet, name: str, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
    b, c, h, w = x.shape
    tokens = norm(ps, f"{name}.norm", x).flatten(2).transpose(1, 2)  # (B, HW, C)
    src = tokens if context is None else context
    q = linear(ps, f"{name}.q", tokens)
    k = linear(ps, f"{name}.k", src)
    v = linear(ps, f"{name}.v", src)
    o = linear(ps, f"{name}.out", tc.attention(q, k, v))
    return tc.add(x, o.transpose(1, 2).reshape(b, c, h, w))


def init_context(ps: ParamSet, name: str, n_tokens: int, dim: int, gen: torch.Generator, std: float = 0.02):
    init_linear(ps, name, 4, n_tokens * dim, gen, std)


def context_tokens(ps: ParamSet, name: str, delta_embed: torch.Tensor, n_tokens: int) -> torch.Tensor:
    """Learned linear embedding of the 4-vector camera delta into ``n_tokens`` tokens."""
    if delta_embed.ndim != 2 or delta_embed.shape[1] != 4:
        raise tc.ShapeError("context_tokens", delta_embed.shape, ("B", 4))
    e = linear(ps, name, delta_embed)
    return e.reshape(delta_embed.shape[0], n_tokens, -1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tc.default_dtype()) / half)
    args = t.to(tc.default_dtype())[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)
