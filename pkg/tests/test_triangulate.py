import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brickasm.errors import DegenerateGeometry, InsufficientViews, NoFeasiblePose, NoVisibleViews
from brickasm.geometry import Ray, camera_at, project, sample_cameras
from brickasm.library import lego_library
from brickasm.scenegen import AssemblyState, LegoPose, feasible_poses, lego_center
from brickasm.triangulate import (TriangulationOptions, least_squares_point, merge_rotation_continuous,
                                  merge_rotation_discrete, point_ray_distance, ray_objective, recover_position,
                                  select_views, smoothed_objective, snap_to_connection, snap_to_ground,
                                  triangulate, yaw_error)

from oracles import grid_minimizer

# minimizer of the three skew rays below, from the grid oracle and frozen here
THREE_RAY_MIN = (0.975, 1.025, 0.975)
THREE_RAY_H = 0.075 * math.sqrt(2)


def three_rays():
    return [Ray((0, 1.05, 1), (1, 0, 0)), Ray((1, 0, 0.95), (0, 1, 0)), Ray((0.95, 1, 0), (0, 0, 1))]


@pytest.mark.parametrize("z,ray,d", [
    ((0, 0, 5), Ray((0, 0, 0), (0, 0, 1)), 0.0),
    ((3, 4, 0), Ray((0, 0, 0), (0, 0, 1)), 5.0),
    ((1, 1, 1), Ray((0, 0, 0), (1, 0, 0)), math.sqrt(2)),
])
def test_point_ray_distance(z, ray, d):
    assert point_ray_distance(z, ray) == pytest.approx(d, abs=1e-12)


def test_select_views():
    assert select_views([0.7, 0.5, 0.9, 0.66]) == {0, 2}
    assert select_views([0, 0, 0, 0]) == set()
    assert select_views([0.5] * 4, theta=0.0) == {0, 1, 2, 3}


def test_exact_intersection():
    res = triangulate([Ray((0, 2, 3), (1, 0, 0)), Ray((1, 0, 3), (0, 1, 0))])
    assert np.allclose(res.position, (1, 2, 3), atol=1e-9) and res.residual < 1e-9


def test_degenerate_and_insufficient():
    with pytest.raises(DegenerateGeometry):
        triangulate([Ray((0, 0, 0), (0, 0, 1)), Ray((1, 0, 0), (0, 0, 1))])
    with pytest.raises(InsufficientViews):
        triangulate([Ray((0, 0, 0), (0, 0, 1))])


def test_three_ray_oracle():
    rays = three_rays()
    best, h = grid_minimizer([r.origin for r in rays], [r.direction for r in rays])
    assert np.allclose(best, THREE_RAY_MIN, atol=1e-3)
    assert h == pytest.approx(THREE_RAY_H, abs=1e-6)
    res = triangulate(rays)
    assert np.allclose(res.position, THREE_RAY_MIN, atol=1e-3)
    assert res.residual == pytest.approx(THREE_RAY_H, abs=1e-9)
    assert res.residual <= res.initial_residual + 1e-12


def _random_rays(rng, k):
    target = rng.uniform(-1, 1, 3)
    rays = []
    for _ in range(k):
        o = rng.normal(size=3) * 5
        d = target - o + rng.normal(size=3) * 0.3
        rays.append(Ray(o, d))
    return rays


def test_smoothed_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rays = _random_rays(rng, int(rng.integers(2, 6)))
        z = rng.uniform(-2, 2, 3)
        _, g = smoothed_objective(z, rays)
        fd = np.zeros(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-5
            fd[k] = (smoothed_objective(z + e, rays)[0] - smoothed_objective(z - e, rays)[0]) / 2e-5
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_descent_and_no_worse_than_init():
    rng = np.random.default_rng(1)
    for _ in range(50):
        rays = _random_rays(rng, int(rng.integers(2, 6)))
        res = triangulate(rays)
        assert all(b <= a + 1e-12 for a, b in zip(res.trace, res.trace[1:]))
        assert res.residual <= ray_objective(least_squares_point(rays), rays) + 1e-12
        assert res.residual == pytest.approx(ray_objective(res.position, rays), abs=1e-12)


def test_matches_grid_oracle_on_random_rays():
    rng = np.random.default_rng(2)
    for _ in range(5):
        rays = _random_rays(rng, 4)
        res = triangulate(rays)
        lo = res.position - 1.0
        _, h = grid_minimizer([r.origin for r in rays], [r.direction for r in rays], lo, lo + 2.0, 0.05, 6)
        assert res.residual <= h + 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_noiseless_recovery(seed):
    rng = np.random.default_rng(seed)
    cams = sample_cameras(rng)
    p = rng.uniform(-2.5, 2.5, 3)
    p[2] = abs(p[2])
    kps = [project(c, p)[:2] for c in cams]
    rec = recover_position(kps, [1.0] * 4, cams)
    assert np.linalg.norm(rec.position - p) < 1e-3 and not rec.low_quality


def test_single_view_fallback():
    cams = sample_cameras(np.random.default_rng(0))
    p = np.array([0.3, -0.2, 0.5])
    kps = [project(c, p)[:2] for c in cams]
    rec = recover_position(kps, [1.0, 0.0, 0.0, 0.0], cams)
    assert rec.low_quality and rec.views == (0,)
    assert point_ray_distance(rec.position, Ray(cams[0].center, p - cams[0].center)) < 1e-9
    with pytest.raises(NoVisibleViews):
        recover_position(kps, [0.0] * 4, cams)


def test_options_gate():
    with pytest.raises(DegenerateGeometry):
        triangulate([Ray((0, 0, 0), (0, 0, 1)), Ray((1, 0, 0), (0, 0.2, 1))], TriangulationOptions(min_angle_deg=20))


# ---------------------------------------------------------------- rotation

def _views(yaws_deg):
    cams = [camera_at((12 * math.cos(a), 12 * math.sin(a), 6.0)) for a in np.radians([0, 90, 180, 270])]
    vr = []
    for y, c in zip(yaws_deg, cams):
        r = math.radians(y) - c.azimuth
        vr.append((math.sin(r), math.cos(r)))
    return vr, cams[:len(yaws_deg)]


def test_continuous_identical():
    vr, cams = _views([40, 40, 40])
    assert math.degrees(merge_rotation_continuous(vr, [1, 1, 1], cams)) == pytest.approx(40)


def test_continuous_wrap():
    vr, cams = _views([359, 1])
    y = math.degrees(merge_rotation_continuous(vr, [1, 1], cams))
    assert min(y, 360 - y) < 1e-9


def test_continuous_weighted():
    a, b = math.radians(10), math.radians(20)
    expected = math.degrees(math.atan2(math.sin(a) + 3 * math.sin(b), math.cos(a) + 3 * math.cos(b)))
    assert expected == pytest.approx(17.50, abs=5e-3)
    vr, cams = _views([10, 20])
    assert math.degrees(merge_rotation_continuous(vr, [1, 3], cams, theta=0.0)) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("yaws,conf,expected", [
    ([90, 90, 180], [1, 1, 1], 90),
    ([0, 90], [0.9, 0.2], 0),
    ([0, 90], [1, 1], 0),
    ([92, 178, 181], [1, 1, 1], 180),
])
def test_discrete_vote(yaws, conf, expected):
    vr, cams = _views(yaws)
    assert math.degrees(merge_rotation_discrete(vr, conf, cams, theta=0.0)) == pytest.approx(expected)


def test_merge_no_views():
    vr, cams = _views([0, 0])
    with pytest.raises(NoVisibleViews):
        merge_rotation_continuous(vr, [0.1, 0.2], cams)
    with pytest.raises(NoVisibleViews):
        merge_rotation_discrete(vr, [0.1, 0.2], cams)


def test_yaw_error_symmetry():
    assert yaw_error(0.0, math.pi, 2) == pytest.approx(0.0)
    assert yaw_error(0.0, math.pi / 2, 4) == pytest.approx(0.0)
    assert yaw_error(0.0, math.pi / 2, 1) == pytest.approx(math.pi / 2)
    assert yaw_error(0.1, 2 * math.pi - 0.1, 1) == pytest.approx(0.2)


# ---------------------------------------------------------------- snapping

LEGO = lego_library()


def _state():
    st = AssemblyState(LEGO)
    st.place(LegoPose(8, 0, 0, 0, 0))
    return st


def test_snap_exact_and_perturbed():
    st = _state()
    shape = LEGO.shape(1)
    rng = np.random.default_rng(0)
    for pose in feasible_poses(st, shape):
        c = np.array(lego_center(shape, pose))
        assert snap_to_connection(c, pose.yaw, st, shape) == pose
        for _ in range(3):
            d = rng.normal(size=3)
            d *= 0.3 / np.linalg.norm(d)
            assert snap_to_connection(c + d, pose.yaw, st, shape) == pose


def test_snap_ground():
    shape = LEGO.shape(8)
    pose = LegoPose(8, -2, -1, 0, 1)
    c = np.array(lego_center(shape, pose)) + 0.2
    assert snap_to_ground(c, pose.yaw, shape) == pose


def test_snap_no_feasible():
    with pytest.raises(NoFeasiblePose):
        snap_to_connection((0, 0, 1), 0.0, AssemblyState(LEGO), LEGO.shape(0))
