"""Pinhole projection, keypoint rays, camera sampling and point-splat rasterization."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera
from .model import Camera, Mask, normalize_angle

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=float).reshape(3)
        d = np.array(self.direction, dtype=float).reshape(3)
        d = d / np.linalg.norm(d)
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_camera(camera: Camera, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts @ camera.rotation.T + camera.translation


def project(camera: Camera, point) -> tuple[float, float, float]:
    """Project a world point to normalized image coordinates (u, v, depth)."""
    x, y, z = to_camera(camera, point)
    if z <= 0.0:
        raise BehindCamera(f"point at camera depth {z:g}")
    return camera.cx + camera.fx * x / z, camera.cy + camera.fy * y / z, float(z)


def project_many(camera: Camera, points) -> np.ndarray:
    """Vectorized projection without the depth check; returns (N, 3) of u, v, depth."""
    pc = to_camera(camera, points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.cx + camera.fx * pc[:, 0] / z
        v = camera.cy + camera.fy * pc[:, 1] / z
    return np.c_[u, v, z]


def keypoint_ray(camera: Camera, keypoint) -> Ray:
    """World-space ray through the back-projections of a keypoint at camera depths -1 and +1."""
    u, v = keypoint
    xn = (u - camera.cx) / camera.fx
    yn = (v - camera.cy) / camera.fy
    near = np.array([-xn, -yn, -1.0])
    far = np.array([xn, yn, 1.0])
    r_t = camera.rotation.T
    w_near = r_t @ (near - camera.translation)
    w_far = r_t @ (far - camera.translation)
    return Ray(0.5 * (w_near + w_far), w_far - w_near)


def look_at(position, target, up=UP) -> np.ndarray:
    """World->camera rotation for a camera at ``position`` looking at ``target`` (y down)."""
    f = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-12:
        r = np.cross(f, np.array([0.0, 1.0, 0.0]))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def camera_at(position, target=(0.0, 0.0, 0.0), fx=1.0, fy=1.0, cx=0.5, cy=0.5,
              width=224, height=224) -> Camera:
    rot = look_at(position, target)
    return Camera(rot, -rot @ np.asarray(position, dtype=float), fx, fy, cx, cy, width, height)


def sample_cameras(rng: np.random.Generator, k: int = 4, distance: float = 12.0,
                   jitter_radius: float = 1.5, target=(0.0, 0.0, 0.0), **intrinsics) -> list[Camera]:
    """Sample ``k`` cameras around the model.

    Camera ``i`` (1-based) sits at azimuth 90*i +- 30 degrees and elevation
    45 +- 15 degrees on a sphere of radius ``distance``, is displaced by a
    uniform offset inside a ball of ``jitter_radius`` and looks at ``target``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cams = []
    for i in range(1, k + 1):
        az = math.radians(90.0 * i + rng.uniform(-30.0, 30.0))
        el = math.radians(45.0 + rng.uniform(-15.0, 15.0))
        pos = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        # uniform in a ball: direction from a Gaussian, radius ~ R * U^(1/3)
        g = rng.standard_normal(3)
        offset = g / np.linalg.norm(g) * jitter_radius * rng.random() ** (1.0 / 3.0)
        cams.append(camera_at(pos + offset, target, **intrinsics))
    return cams


def view_rotation(camera: Camera, yaw: float) -> float:
    return normalize_angle(yaw - camera.azimuth)


def brick_points(point_cloud: np.ndarray, position, yaw: float) -> np.ndarray:
    return point_cloud @ rot_z(yaw).T + np.asarray(position, dtype=float)


def rasterize_points(clouds: list[np.ndarray], camera: Camera, resolution=None):
    """Splat world-space point clouds into one z-buffer.

    Each point covers exactly the raster cell it projects into. Returns, for
    each cloud, ``(full_cells, visible_cells)`` as sorted flat cell indices.
    Depth ties resolve to the lower cloud index.
    """
    h, w = resolution if resolution is not None else (camera.height, camera.width)
    cells, depths, owner = [], [], []
    for k, pts in enumerate(clouds):
        uvz = project_many(camera, pts)
        ok = uvz[:, 2] > 0
        col = np.floor(uvz[ok, 0] * w)
        row = np.floor(uvz[ok, 1] * h)
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        flat = (row[inside] * w + col[inside]).astype(np.int64)
        cells.append(flat)
        depths.append(uvz[ok, 2][inside])
        owner.append(np.full(flat.size, k, dtype=np.int64))
    full = [np.unique(c) for c in cells]
    if not cells or sum(c.size for c in cells) == 0:
        return [(f, f) for f in full]
    cells_all = np.concatenate(cells)
    depth_all = np.concatenate(depths)
    owner_all = np.concatenate(owner)
    order = np.lexsort((owner_all, depth_all, cells_all))
    first = np.ones(order.size, dtype=bool)
    first[1:] = cells_all[order][1:] != cells_all[order][:-1]
    win_cells = cells_all[order][first]
    win_owner = owner_all[order][first]
    visible = [np.sort(win_cells[win_owner == k]) for k in range(len(clouds))]
    return list(zip(full, visible))


def rasterize_scene(scene, camera: Camera, resolution=(224, 224), library=None):
    """Per-brick ``(visible_mask, visible_ratio)`` for one camera."""
    if library is None:
        from .library import get_library
        library = get_library(scene.library_ref)
    clouds = [brick_points(library.shape(b.shape_id).point_cloud, b.pose.position, b.pose.yaw)
              for b in scene.bricks]
    h, w = resolution
    out = []
    for full, vis in rasterize_points(clouds, camera, resolution):
        ratio = vis.size / full.size if full.size else 0.0
        out.append((Mask.from_cells(h, w, vis), ratio))
    return out
