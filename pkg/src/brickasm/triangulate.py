"""Brick pose recovery from confidence-gated multi-view detections."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InsufficientViews, NoFeasiblePose, NoVisibleViews
from .geometry import Ray, keypoint_ray
from .model import CONTINUOUS, TWO_PI, BrickShape, normalize_angle
from .scenegen import AssemblyState, LegoPose, feasible_poses, lego_center, rotated_cells

DEFAULT_THETA = 0.66
HUBER_DELTA = 1e-6
QUARTER = math.pi / 2


def point_ray_distance(z, ray: Ray) -> float:
    w = np.asarray(z, dtype=float) - ray.origin
    return float(np.linalg.norm(w - (w @ ray.direction) * ray.direction))


def select_views(confidences, theta: float = DEFAULT_THETA) -> set[int]:
    """Views whose confidence is strictly above ``theta``."""
    return {k for k, c in enumerate(confidences) if c > theta}


def _perp(z, origins, dirs):
    w = z - origins
    return w - np.sum(w * dirs, axis=1, keepdims=True) * dirs


def ray_objective(z, rays) -> float:
    """Sum of point-to-ray distances."""
    return sum(point_ray_distance(z, r) for r in rays)


def smoothed_objective(z, rays, delta: float = HUBER_DELTA):
    """Huber-smoothed sum of distances and its gradient."""
    origins = np.array([r.origin for r in rays])
    dirs = np.array([r.direction for r in rays])
    perp = _perp(np.asarray(z, dtype=float), origins, dirs)
    d = np.linalg.norm(perp, axis=1)
    near = d <= delta
    value = np.where(near, d * d / (2 * delta), d - delta / 2).sum()
    scale = 1.0 / np.where(near, delta, d)
    return float(value), (perp * scale[:, None]).sum(axis=0)


def _metrics(z, origins, dirs, projectors, delta):
    """Exact (damped) Hessian of the smoothed objective and the reweighted metric."""
    perp = _perp(z, origins, dirs)
    d = np.linalg.norm(perp, axis=1)
    dd = np.maximum(d, delta)
    far = d > delta
    outer = np.where(far[:, None, None], perp[:, :, None] * perp[:, None, :] / (dd ** 2)[:, None, None], 0.0)
    metric = (projectors / dd[:, None, None]).sum(axis=0)
    hess = ((projectors - outer) / dd[:, None, None]).sum(axis=0)
    return hess + 1e-6 * metric, metric


def least_squares_point(rays) -> np.ndarray:
    """Closed-form minimizer of the sum of squared point-to-line distances."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for r in rays:
        m = np.eye(3) - np.outer(r.direction, r.direction)
        a += m
        b += m @ r.origin
    return np.linalg.solve(a, b)


@dataclass(frozen=True)
class TriangulationOptions:
    min_angle_deg: float = 5.0
    delta: float = HUBER_DELTA
    grad_tol: float = 1e-8
    max_iter: int = 200
    initial_step: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4


@dataclass(frozen=True)
class TriangulationResult:
    position: np.ndarray
    residual: float
    initial_residual: float
    iterations: int
    grad_norm: float
    trace: tuple  # smoothed objective after every accepted step


def _check_geometry(rays, min_angle_deg):
    if len(rays) < 2:
        raise InsufficientViews(f"{len(rays)} ray(s); need at least 2")
    cos_max = math.cos(math.radians(min_angle_deg))
    dirs = np.array([r.direction for r in rays])
    cos = np.abs(dirs @ dirs.T)
    off = ~np.eye(len(rays), dtype=bool)
    if not (cos[off] <= cos_max).any():
        raise DegenerateGeometry(f"all ray pairs closer than {min_angle_deg} degrees")


def _backtrack(rays, z, f, step_dir, slope, opt):
    t = opt.initial_step
    while t >= 1e-20:
        cand = z + t * step_dir
        fc, gc = smoothed_objective(cand, rays, opt.delta)
        if fc <= f + opt.armijo * t * slope:
            return cand, fc, gc
        t *= opt.shrink
    return None


def triangulate(rays, options: TriangulationOptions | None = None) -> TriangulationResult:
    """Point minimizing the summed distance to ``rays``.

    Starts from the least-squares point and runs gradient descent with a
    backtracking line search on the Huber-smoothed objective. The gradient
    is preconditioned two ways, by the damped Hessian and by the reweighted
    least-squares metric sum_i (I - D_i D_i^T) / max(d_i, delta); whichever
    step lowers the objective more is kept. The second handles minimizers
    lying on one of the rays, where the Hessian loses curvature.
    """
    opt = options or TriangulationOptions()
    rays = list(rays)
    _check_geometry(rays, opt.min_angle_deg)
    origins = np.array([r.origin for r in rays])
    dirs = np.array([r.direction for r in rays])
    projectors = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]

    z = least_squares_point(rays)
    init_true = ray_objective(z, rays)
    f, g = smoothed_objective(z, rays, opt.delta)
    trace = [f]
    it = 0
    while it < opt.max_iter and np.linalg.norm(g) >= opt.grad_tol:
        it += 1
        best = None
        for m in _metrics(z, origins, dirs, projectors, opt.delta):
            step_dir = -np.linalg.solve(m, g)
            slope = float(g @ step_dir)
            if slope >= 0.0:
                step_dir, slope = -g, -float(g @ g)
            found = _backtrack(rays, z, f, step_dir, slope, opt)
            if found is not None and (best is None or found[1] < best[1]):
                best = found
        if best is None:
            break  # no descent possible at machine precision
        converged = f - best[1] <= 1e-16 * max(1.0, abs(f))
        z, f, g = best
        trace.append(f)
        if converged:
            break
    residual = ray_objective(z, rays)
    if residual > init_true:
        z = least_squares_point(rays)
        residual = init_true
    return TriangulationResult(z, residual, init_true, it, float(np.linalg.norm(g)), tuple(trace))


# ---------------------------------------------------------------- position

@dataclass(frozen=True)
class RecoveredPosition:
    position: np.ndarray
    low_quality: bool
    views: tuple  # view indices that produced the rays


def closest_point_on_ray(ray: Ray, point) -> np.ndarray:
    t = max(0.0, float((np.asarray(point, dtype=float) - ray.origin) @ ray.direction))
    return ray.origin + t * ray.direction


def recover_position(keypoints, confidences, cameras, theta: float = DEFAULT_THETA,
                     volume_center=(0.0, 0.0, 0.0), options: TriangulationOptions | None = None
                     ) -> RecoveredPosition:
    """3D position of one brick from its per-view keypoints.

    Views above ``theta`` are triangulated. With fewer than two usable views
    the result is flagged low quality and every keypoint with nonzero
    confidence is used; with a single ray the closest point to
    ``volume_center`` on it is returned.
    """
    if not any(c > 0.0 for c in confidences):
        raise NoVisibleViews("every view has zero confidence")
    have_kp = [k for k, kp in enumerate(keypoints) if kp is not None and confidences[k] > 0.0]
    gated = sorted(k for k in select_views(confidences, theta) if keypoints[k] is not None)
    try:
        rays = [keypoint_ray(cameras[k], keypoints[k]) for k in gated]
        res = triangulate(rays, options)
        return RecoveredPosition(res.position, False, tuple(gated))
    except (InsufficientViews, DegenerateGeometry):
        pass
    ranked = sorted(have_kp, key=lambda k: (-confidences[k], k))
    if not ranked:
        raise NoVisibleViews("no view has a keypoint")
    try:
        rays = [keypoint_ray(cameras[k], keypoints[k]) for k in ranked]
        res = triangulate(rays, options)
        return RecoveredPosition(res.position, True, tuple(sorted(ranked)))
    except (InsufficientViews, DegenerateGeometry):
        best = ranked[0]
        ray = keypoint_ray(cameras[best], keypoints[best])
        return RecoveredPosition(closest_point_on_ray(ray, volume_center), True, (best,))


# ---------------------------------------------------------------- rotation

def _unit_angle(sc) -> float:
    s, c = sc
    r = math.hypot(s, c)
    if r == 0.0:
        return 0.0
    return math.atan2(s / r, c / r)


def world_yaws(view_rotations, cameras) -> list[float]:
    return [normalize_angle(_unit_angle(sc) + cam.azimuth) for sc, cam in zip(view_rotations, cameras)]


def merge_rotation_continuous(view_rotations, confidences, cameras, theta: float = DEFAULT_THETA) -> float:
    """Confidence-weighted circular mean of the per-view world yaws."""
    views = sorted(select_views(confidences, theta))
    if not views:
        raise NoVisibleViews(f"no view above confidence {theta}")
    yaws = world_yaws(view_rotations, cameras)
    s = sum(confidences[k] * math.sin(yaws[k]) for k in views)
    c = sum(confidences[k] * math.cos(yaws[k]) for k in views)
    return normalize_angle(math.atan2(s, c))


def snap_quarter(yaw: float) -> int:
    return int(round(normalize_angle(yaw) / QUARTER)) % 4


def merge_rotation_discrete(view_rotations, confidences, cameras, theta: float = DEFAULT_THETA) -> float:
    """Vote among 0/90/180/270 degrees.

    Each view's world yaw is snapped to a quarter turn; the class with the
    largest summed confidence wins, then the larger vote count, then the
    smaller angle.
    """
    views = sorted(select_views(confidences, theta))
    if not views:
        raise NoVisibleViews(f"no view above confidence {theta}")
    yaws = world_yaws(view_rotations, cameras)
    weight = [0.0] * 4
    count = [0] * 4
    for k in views:
        q = snap_quarter(yaws[k])
        weight[q] += confidences[k]
        count[q] += 1
    best = min(range(4), key=lambda q: (-round(weight[q], 12), -count[q], q))
    return best * QUARTER


def yaw_error(a: float, b: float, symmetry_order: int) -> float:
    """Smallest rotation between two yaws, modulo the shape's symmetry."""
    if symmetry_order == CONTINUOUS:
        return 0.0
    period = TWO_PI / symmetry_order
    d = math.fmod(abs(a - b), period)
    return min(d, period - d)


# ---------------------------------------------------------------- LEGO snapping

def _rank_key(shape, pose, position, yaw):
    c = np.array(lego_center(shape, pose))
    return (round(float(np.linalg.norm(c - np.asarray(position, dtype=float))), 9),
            round(yaw_error(pose.yaw, yaw, shape.symmetry_order), 9),
            pose.layer, pose.gx, pose.gy, pose.rot)


def snap_to_connection(position, yaw: float, state: AssemblyState, shape: BrickShape) -> LegoPose:
    """Feasible stud-connected pose nearest to ``position``, then to ``yaw``."""
    options = feasible_poses(state, shape)
    if not options:
        raise NoFeasiblePose(f"no feasible pose for shape {shape.id}")
    return min(options, key=lambda p: _rank_key(shape, p, position, yaw))


def snap_to_ground(position, yaw: float, shape: BrickShape) -> LegoPose:
    """Nearest layer-0 grid pose, used for the base brick."""
    options = []
    for rot in range(4):
        cells = rotated_cells(shape, rot)
        wr = max(i for i, _ in cells) + 1
        dr = max(j for _, j in cells) + 1
        gx = math.floor(position[0] - wr / 2)
        gy = math.floor(position[1] - dr / 2)
        options.extend(LegoPose(shape.id, gx + a, gy + b, 0, rot) for a in (0, 1) for b in (0, 1))
    return min(options, key=lambda p: _rank_key(shape, p, position, yaw))
