import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvfuse.camera import (CameraPose, ViewDelta, camera_to_world, embed_delta, pose_to_extrinsics, target_rays,
                           view_delta, world_to_camera, wrap_angle)

angles = st.floats(0, 359.99)
elevs = st.floats(-60, 60)
radii = st.floats(0.5, 5)


def test_axis_aligned_extrinsics():
    R, t = pose_to_extrinsics(CameraPose(0.0, 0.0, 2.0), torch.float64)
    assert torch.allclose(torch.tensor(CameraPose(0.0, 0.0, 2.0).position, dtype=torch.float64),
                          torch.tensor([2.0, 0, 0], dtype=torch.float64))
    origin_cam = R @ torch.zeros(3, dtype=torch.float64) + t
    assert torch.allclose(origin_cam, torch.tensor([0, 0, -2.0], dtype=torch.float64), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(angles, elevs, radii)
def test_rotation_proper_and_origin_distance(th, ph, r):
    pose = CameraPose.from_degrees(th, ph, r)
    R, t = pose_to_extrinsics(pose, torch.float64)
    assert torch.allclose(R @ R.T, torch.eye(3, dtype=torch.float64), atol=1e-6)
    assert abs(torch.linalg.det(R).item() - 1) < 1e-6
    assert abs(world_to_camera(pose, torch.zeros(1, 3, dtype=torch.float64)).norm().item() - r) < 1e-9


def test_gimbal_rejected():
    with pytest.raises(ValueError, match="gimbal"):
        pose_to_extrinsics(CameraPose(0.3, math.pi / 2, 2.0))


def test_world_to_camera_contract():
    pose = CameraPose.from_degrees(73, -20, 1.7)
    pts = torch.tensor([[0.0, 0, 0], list(pose.position)], dtype=torch.float64)
    cam = world_to_camera(pose, pts)
    assert torch.allclose(cam[0], torch.tensor([0, 0, -1.7], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(cam[1], torch.zeros(3, dtype=torch.float64), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(angles, elevs, radii)
def test_world_camera_roundtrip(th, ph, r):
    pose = CameraPose.from_degrees(th, ph, r)
    pts = torch.randn(10, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(camera_to_world(pose, world_to_camera(pose, pts)), pts, atol=1e-6)


def test_view_delta_examples():
    a = CameraPose.from_degrees(30, 10, 1.5)
    assert view_delta(a, a) == ViewDelta(0.0, 0.0, 0.0)
    d = view_delta(CameraPose.from_degrees(350), CameraPose.from_degrees(10))
    assert math.degrees(d.d_theta) == pytest.approx(20.0)
    d = view_delta(a, CameraPose.from_degrees(120, 20, 1.5))
    assert math.degrees(d.d_theta) == pytest.approx(90.0)
    assert math.degrees(d.d_phi) == pytest.approx(10.0)
    assert d.d_radius == 0.0


def test_wrap_boundary_is_plus_pi():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    d1 = view_delta(CameraPose.from_degrees(0), CameraPose.from_degrees(180))
    d2 = view_delta(CameraPose.from_degrees(180), CameraPose.from_degrees(0))
    assert d1.d_theta == pytest.approx(math.pi) and d2.d_theta == pytest.approx(math.pi)


@settings(max_examples=100, deadline=None)
@given(angles, angles)
def test_view_delta_antisymmetric_and_unwraps(a, b):
    pa, pb = CameraPose.from_degrees(a), CameraPose.from_degrees(b)
    dab, dba = view_delta(pa, pb).d_theta, view_delta(pb, pa).d_theta
    assert -math.pi < dab <= math.pi
    if abs(abs(dab) - math.pi) > 1e-9:
        assert dab == pytest.approx(-dba, abs=1e-9)
    assert math.remainder(pa.theta + dab - pb.theta, 2 * math.pi) == pytest.approx(0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(angles, elevs, radii)
def test_embed_self_delta(th, ph, r):
    p = CameraPose.from_degrees(th, ph, r)
    assert embed_delta(view_delta(p, p)).tolist() == [0.0, 0.0, 1.0, 0.0]


def test_embed_examples():
    assert embed_delta(ViewDelta(0, 0, 0)).tolist() == [0, 0, 1, 0]
    e = embed_delta(ViewDelta(0.4, math.pi / 2, -0.3)).double()
    assert e.tolist() == pytest.approx([0.4, 1.0, 0.0, -0.3], abs=1e-7)
    e = embed_delta(ViewDelta(math.pi, math.pi / 6, 0.5)).double()
    assert e.tolist() == pytest.approx([math.pi, 0.5, 0.866025, 0.5], abs=1e-6)


def test_center_ray_odd_grid():
    rays = target_rays(CameraPose(0.0, 0.0, 2.0), 5, 50.0, torch.float64)
    assert torch.allclose(rays.directions[2, 2], torch.tensor([-1.0, 0, 0], dtype=torch.float64), atol=1e-6)


@pytest.mark.parametrize("grid", [2, 7, 16])
def test_rays_unit_and_bounds(grid):
    rays = target_rays(CameraPose.from_degrees(40, 25, 2.0), grid, 50.0, torch.float64)
    assert torch.allclose(rays.directions.norm(dim=-1), torch.ones(grid, grid, dtype=torch.float64), atol=1e-6)
    assert rays.near < rays.far


def test_even_grid_center_within_half_pixel():
    grid, fov = 16, 50.0
    rays = target_rays(CameraPose(0.0, 0.0, 2.0), grid, fov, torch.float64)
    axis = torch.tensor([-1.0, 0, 0], dtype=torch.float64)
    # angular pixel pitch on the optical axis
    pixel_angle = 2 * math.tan(math.radians(fov) / 2) / (grid - 1)
    c = rays.directions[grid // 2, grid // 2]
    assert math.acos(min(1.0, (c @ axis).item())) < 0.5 * math.sqrt(2) * pixel_angle + 1e-9


@pytest.mark.parametrize("fov", [20.0, 50.0, 90.0])
def test_corner_ray_angle_closed_form(fov):
    rays = target_rays(CameraPose.from_degrees(10, 5, 2.0), 8, fov, torch.float64)
    R, _ = pose_to_extrinsics(CameraPose.from_degrees(10, 5, 2.0), torch.float64)
    axis = -R[2]
    expected = math.atan(math.sqrt(2) * math.tan(math.radians(fov) / 2))
    for i, j in [(0, 0), (0, 7), (7, 0), (7, 7)]:
        got = math.acos((rays.directions[i, j] @ axis).item())
        assert got == pytest.approx(expected, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(angles, elevs, st.floats(0.1, 3.0))
def test_ray_point_consistency(th, ph, s):
    pose = CameraPose.from_degrees(th, ph, 2.0)
    rays = target_rays(pose, 4, 50.0, torch.float64)
    o, d = rays.origins[1, 2], rays.directions[1, 2]
    p = (o + s * d)[None]
    cam = world_to_camera(pose, p)[0]
    cam_dir = world_to_camera(pose, (o + d)[None])[0]  # camera origin maps to 0
    cross = torch.linalg.cross(cam, cam_dir)
    assert cross.norm().item() < 1e-5


def test_pose_serialization_degrees():
    p = CameraPose.from_degrees(45.0, -10.0, 2.0)
    d = p.to_dict()
    assert d == pytest.approx({"theta_deg": 45.0, "phi_deg": -10.0, "radius": 2.0})
    assert CameraPose.from_dict(d) == p


def test_theta_wraps_into_range():
    assert CameraPose.from_degrees(370).theta == pytest.approx(math.radians(10))
    assert 0 <= CameraPose(-0.5, 0.0).theta < 2 * math.pi
