"""Built-in brick libraries and surface point-cloud sampling."""
from __future__ import annotations

import functools
import json
import math
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import triangulate

from .model import CONTINUOUS, POINTS_PER_SHAPE, BrickShape, BrickTexture, Library

LEGO_BRICK_HEIGHT = 1.2
LEGO_PITCH = 1.0


def _prism_triangles(footprint, height):
    poly = Polygon(footprint)
    tris = []
    h2 = height / 2.0
    for t in triangulate(poly):
        if not poly.contains(t.centroid):
            continue
        xy = np.array(t.exterior.coords[:3])
        tris.append(np.c_[xy, np.full(3, h2)])
        tris.append(np.c_[xy, np.full(3, -h2)])
    ring = list(poly.exterior.coords)[:-1]
    for k in range(len(ring)):
        (x0, y0), (x1, y1) = ring[k], ring[(k + 1) % len(ring)]
        a, b = (x0, y0, -h2), (x1, y1, -h2)
        c, d = (x1, y1, h2), (x0, y0, h2)
        tris.append(np.array([a, b, c]))
        tris.append(np.array([a, c, d]))
    return tris


def _wedge_triangles(side, height):
    # roof-shaped prism: square base, ridge along local x at the top
    s, h2 = side / 2.0, height / 2.0
    b0, b1, b2, b3 = (-s, -s, -h2), (s, -s, -h2), (s, s, -h2), (-s, s, -h2)
    r0, r1 = (-s, 0.0, h2), (s, 0.0, h2)
    faces = [
        (b0, b1, b2), (b0, b2, b3),            # bottom
        (b0, b1, r1), (b0, r1, r0),            # sloped -y
        (b3, b2, r1), (b3, r1, r0),            # sloped +y
        (b0, b3, r0), (b1, b2, r1),            # triangular ends
    ]
    return [np.array(f, dtype=float) for f in faces]


def sample_surface(triangles, n=POINTS_PER_SHAPE, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle soup."""
    rng = np.random.default_rng(seed)
    tris = np.stack(triangles)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    t = tris[idx]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def _rect(w, d):
    return [(-w / 2, -d / 2), (w / 2, -d / 2), (w / 2, d / 2), (-w / 2, d / 2)]


def _circle(diameter, segments=32):
    r = diameter / 2
    return [(r * math.cos(2 * math.pi * k / segments), r * math.sin(2 * math.pi * k / segments))
            for k in range(segments)]


CLEVR_TEXTURES = [
    ("rubber_red", (0.68, 0.16, 0.14)), ("rubber_blue", (0.16, 0.30, 0.72)),
    ("metal_gray", (0.56, 0.57, 0.58)), ("metal_gold", (0.83, 0.69, 0.22)),
    ("wood_oak", (0.60, 0.44, 0.26)), ("marble_white", (0.90, 0.89, 0.86)),
    ("plastic_green", (0.18, 0.60, 0.25)), ("plastic_purple", (0.50, 0.27, 0.62)),
]


@functools.lru_cache(maxsize=None)
def clevr_library() -> Library:
    """Six CLEVR-style shapes and 16 textures (8 materials plus their flat mean colors)."""
    specs = [
        ("cube", _rect(1, 1), 1.0, 4, None),
        ("tall_prism", _rect(1, 1), 2.0, 4, None),
        ("slab_1x2", _rect(1, 2), 0.5, 2, None),
        ("slab_2x2", _rect(2, 2), 0.5, 4, None),
        ("cylinder", _circle(1.0), 1.0, CONTINUOUS, None),
        ("wedge", _rect(math.sqrt(2), math.sqrt(2)), math.sqrt(2) / 2, 2, "wedge"),
    ]
    shapes = []
    for sid, (name, fp, h, sym, kind) in enumerate(specs):
        tris = _wedge_triangles(math.sqrt(2), h) if kind == "wedge" else _prism_triangles(fp, h)
        shapes.append(BrickShape(sid, name, fp, h, sample_surface(tris, seed=1000 + sid), sym,
                                 flat_top=kind != "wedge"))
    textures = []
    for k, (name, rgb) in enumerate(CLEVR_TEXTURES):
        textures.append(BrickTexture(2 * k, name, rgb))
        mean = sum(rgb) / 3
        textures.append(BrickTexture(2 * k + 1, name + "_flat", (mean, mean, mean)))
    return Library("clevr", shapes, textures)


def _cells_polygon(cells):
    from shapely.ops import unary_union
    from shapely.geometry import box

    poly = unary_union([box(i, j, i + 1, j + 1) for i, j in cells]).simplify(0)
    return list(poly.exterior.coords)[:-1]


LEGO_TEXTURES = [
    ("red", (0.79, 0.10, 0.10)), ("blue", (0.05, 0.34, 0.73)), ("yellow", (0.96, 0.80, 0.18)),
    ("green", (0.16, 0.50, 0.20)), ("white", (0.95, 0.95, 0.95)), ("black", (0.10, 0.10, 0.10)),
    ("orange", (0.93, 0.47, 0.13)), ("gray", (0.63, 0.65, 0.65)),
]


@functools.lru_cache(maxsize=None)
def lego_library() -> Library:
    """Twelve stud bricks of one height and eight colors.

    ``stud_top``/``socket_bottom`` are integer cell offsets from the brick's
    bounding-box minimum corner; the footprint polygon is centered on the box.
    """
    rects = [(1, 1), (1, 2), (1, 3), (1, 4), (1, 6), (1, 8), (2, 2), (2, 3), (2, 4), (2, 6), (2, 8)]
    cell_sets = [(f"brick_{w}x{d}", [(i, j) for i in range(w) for j in range(d)]) for w, d in rects]
    cell_sets.append(("corner_2x2", [(0, 0), (1, 0), (0, 1)]))
    shapes = []
    for sid, (name, cells) in enumerate(cell_sets):
        w = max(i for i, _ in cells) + 1
        d = max(j for _, j in cells) + 1
        fp = [(x - w / 2, y - d / 2) for x, y in _cells_polygon(cells)]
        if name.startswith("corner"):
            sym = 1
        else:
            sym = 4 if w == d else 2
        pc = sample_surface(_prism_triangles(fp, LEGO_BRICK_HEIGHT), seed=2000 + sid)
        shapes.append(BrickShape(sid, name, fp, LEGO_BRICK_HEIGHT, pc, sym,
                                 stud_top=cells, socket_bottom=cells))
    textures = [BrickTexture(k, name, rgb) for k, (name, rgb) in enumerate(LEGO_TEXTURES)]
    return Library("lego", shapes, textures)


@functools.lru_cache(maxsize=None)
def _load_library_file(path: str) -> Library:
    return Library.from_dict(json.loads(Path(path).read_text()))


def get_library(ref: str) -> Library:
    """Resolve a library reference: a built-in name or a path to a library JSON file."""
    if ref == "clevr":
        return clevr_library()
    if ref == "lego":
        return lego_library()
    return _load_library_file(str(Path(ref).resolve()))
