"""Spherical camera poses, relative deltas, and target-view rays.

Convention: a pose at azimuth ``theta``, elevation ``phi`` and distance ``radius``
sits at ``radius * (cos phi cos theta, cos phi sin theta, sin phi)`` and looks at
the origin along its camera-space -z axis, with world +z as the up direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

TWO_PI = 2 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; exactly +pi at the boundary."""
    w = math.fmod(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    elif w > math.pi:
        w -= TWO_PI
    return w


@dataclass(frozen=True)
class CameraPose:
    theta: float
    phi: float
    radius: float = 2.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 <= self.theta < TWO_PI:
            object.__setattr__(self, "theta", self.theta % TWO_PI)

    @classmethod
    def from_degrees(cls, theta_deg: float, phi_deg: float = 0.0, radius: float = 2.0) -> "CameraPose":
        return cls(math.radians(theta_deg % 360.0), math.radians(phi_deg), radius)

    def to_dict(self) -> dict:
        return {"theta_deg": math.degrees(self.theta), "phi_deg": math.degrees(self.phi), "radius": self.radius}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls.from_degrees(d["theta_deg"], d["phi_deg"], d["radius"])

    @property
    def position(self) -> tuple[float, float, float]:
        cp = math.cos(self.phi)
        return (self.radius * cp * math.cos(self.theta), self.radius * cp * math.sin(self.theta),
                self.radius * math.sin(self.phi))


@dataclass(frozen=True)
class ViewDelta:
    d_theta: float
    d_phi: float
    d_radius: float


@dataclass
class RayBatch:
    origins: torch.Tensor      # (H, W, 3)
    directions: torch.Tensor   # (H, W, 3), unit norm
    near: float
    far: float


def pose_to_extrinsics(pose: CameraPose, dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """World-to-camera rotation ``R`` and translation ``t`` with ``x_cam = R x_world + t``."""
    if abs(pose.phi) >= math.pi / 2 - 1e-12:
        raise ValueError(f"gimbal pose: elevation {math.degrees(pose.phi):.3f} deg has no defined up vector")
    dtype = dtype or torch.get_default_dtype()
    c = torch.tensor(pose.position, dtype=torch.float64)
    forward = -c / c.norm()
    up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    right = torch.linalg.cross(forward, up)
    right = right / right.norm()
    cam_up = torch.linalg.cross(right, forward)
    R = torch.stack([right, cam_up, -forward])
    t = -R @ c
    return R.to(dtype), t.to(dtype)


def world_to_camera(pose: CameraPose, points: torch.Tensor) -> torch.Tensor:
    R, t = pose_to_extrinsics(pose, points.dtype)
    return points @ R.T + t


def camera_to_world(pose: CameraPose, points: torch.Tensor) -> torch.Tensor:
    R, t = pose_to_extrinsics(pose, points.dtype)
    return (points - t) @ R


def world_to_frame(pose: CameraPose, points: torch.Tensor) -> torch.Tensor:
    """Camera-aligned axes centred on the look-at point (the world origin)."""
    R, _ = pose_to_extrinsics(pose, points.dtype)
    return points @ R.T


def view_delta(src: CameraPose, dst: CameraPose) -> ViewDelta:
    return ViewDelta(wrap_angle(dst.theta - src.theta), dst.phi - src.phi, dst.radius - src.radius)


def embed_delta(d: ViewDelta) -> torch.Tensor:
    return torch.tensor([d.d_theta, math.sin(d.d_phi), math.cos(d.d_phi), d.d_radius],
                        dtype=torch.get_default_dtype())


def pixel_offsets(n: int) -> torch.Tensor:
    """Pixel-centre coordinates in [-1, 1]; the outermost centres land exactly on +-1."""
    return torch.linspace(-1.0, 1.0, n, dtype=torch.float64)


def target_rays(pose: CameraPose, grid: tuple[int, int] | int, fov_deg: float = 50.0,
                dtype: torch.dtype | None = None) -> RayBatch:
    """One ray per pixel; row 0 is the top of the image."""
    h, w = (grid, grid) if isinstance(grid, int) else grid
    if not 0 < fov_deg < 120:
        raise ValueError(f"fov must be in (0, 120) degrees, got {fov_deg}")
    if h < 2 or w < 2:
        raise ValueError(f"grid must be at least 2x2, got {h}x{w}")
    dtype = dtype or torch.get_default_dtype()
    tan_half = math.tan(math.radians(fov_deg) / 2)
    # square pixels: the longer side spans the fov
    scale = tan_half / max(h - 1, w - 1)
    xs = (torch.arange(w, dtype=torch.float64) - (w - 1) / 2) * 2 * scale
    ys = -(torch.arange(h, dtype=torch.float64) - (h - 1) / 2) * 2 * scale
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    d_cam = torch.stack([xx, yy, -torch.ones_like(xx)], dim=-1)
    d_cam = d_cam / d_cam.norm(dim=-1, keepdim=True)
    R, _ = pose_to_extrinsics(pose, torch.float64)
    dirs = d_cam @ R
    origins = torch.tensor(pose.position, dtype=torch.float64).expand(h, w, 3)
    r = pose.radius
    near, far = max(r - math.sqrt(3.0), 1e-3), r + math.sqrt(3.0)
    return RayBatch(origins.to(dtype).clone(), dirs.to(dtype), near, far)


def ray_box_intersect(origins: torch.Tensor, directions: torch.Tensor, extent: float = 1.0
                      ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test against [-extent, extent]^3. Returns (t_enter, t_exit, hit mask)."""
    inv = 1.0 / torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (-extent - origins) * inv
    t1 = (extent - origins) * inv
    t_enter = torch.minimum(t0, t1).amax(dim=-1).clamp_min(0.0)
    t_exit = torch.maximum(t0, t1).amin(dim=-1)
    return t_enter, t_exit, t_exit > t_enter
