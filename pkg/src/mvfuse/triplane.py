"""Tri-plane features and differentiable point queries."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import tensor_core as tc
from .camera import CameraPose, pose_to_extrinsics

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz


@dataclass
class TriPlane:
    """``planes`` is (3, C, P, P) ordered xy, xz, yz; rows index the second axis of each pair."""

    planes: torch.Tensor
    frame: CameraPose
    extent: float = 1.0

    def __post_init__(self):
        p = self.planes
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[2] != p.shape[3]:
            raise tc.ShapeError("TriPlane", p.shape, (3, "C", "P", "P"))
        if p.shape[1] < 2:
            raise ValueError("tri-plane needs at least 2 channels (density + payload)")

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[1]


def bilinear_sample(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Align-corners bilinear lookup.

    ``plane`` is (..., C, P, Q), ``uv`` is (..., N, 2) with u along columns and v
    along rows; u = -1/+1 hit the first/last texel centres. Samples with any
    coordinate outside [-1, 1] are zero. Returns (..., N, C).
    """
    if plane.ndim < 3 or uv.shape[-1] != 2 or plane.shape[:-3] != uv.shape[:-2]:
        raise tc.ShapeError("bilinear_sample", plane.shape, uv.shape)
    c, rows, cols = plane.shape[-3:]
    lead = plane.shape[:-3]
    flat = plane.reshape(-1, c, rows * cols)
    uv2 = uv.reshape(flat.shape[0], -1, 2)
    inside = ((uv2 >= -1) & (uv2 <= 1)).all(dim=-1)

    x = (uv2[..., 0] + 1) * 0.5 * (cols - 1)
    y = (uv2[..., 1] + 1) * 0.5 * (rows - 1)
    x0f = x.detach().floor().clamp(0, cols - 2)
    y0f = y.detach().floor().clamp(0, rows - 2)
    wx = x - x0f
    wy = y - y0f
    x0, y0 = x0f.long(), y0f.long()

    def tap(yi, xi):
        idx = (yi * cols + xi).unsqueeze(1).expand(-1, c, -1)
        return torch.gather(flat, 2, idx)  # (B, C, N)

    out = (tap(y0, x0) * ((1 - wx) * (1 - wy)).unsqueeze(1)
           + tap(y0, x0 + 1) * (wx * (1 - wy)).unsqueeze(1)
           + tap(y0 + 1, x0) * ((1 - wx) * wy).unsqueeze(1)
           + tap(y0 + 1, x0 + 1) * (wx * wy).unsqueeze(1))
    out = out * inside.unsqueeze(1).to(out.dtype)
    return out.transpose(1, 2).reshape(*lead, uv.shape[-2], c)


def query_frame_points(planes: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Sum of the three plane samples for points already in normalized plane coordinates.

    ``planes`` is (..., 3, C, P, P), ``pts`` is (..., N, 3). Points outside [-1, 1]^3 give zeros.
    """
    inside = (pts.abs() <= 1).all(dim=-1, keepdim=True).to(pts.dtype)
    out = None
    for k, (a, b) in enumerate(PLANE_AXES):
        s = bilinear_sample(planes[..., k, :, :, :], pts[..., [a, b]])
        out = s if out is None else out + s
    return out * inside


def query_points(tp: TriPlane, points_world: torch.Tensor) -> torch.Tensor:
    """Features (N, C) of world-space points (N, 3)."""
    R, _ = pose_to_extrinsics(tp.frame, points_world.dtype)
    local = (points_world @ R.T) / tp.extent
    return query_frame_points(tp.planes, local)


def decode_sigma_payload(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if features.shape[-1] < 2:
        raise tc.ShapeError("decode_sigma_payload", features.shape, ("N", ">=2"))
    return tc.softplus(features[..., 0]), features[..., 1:]
