"""Procedural CLEVR-style and LEGO-style assembly scenes with ground truth."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from shapely import affinity
from shapely.geometry import Point, Polygon, box
from shapely.ops import unary_union

from .errors import BehindCamera, EmptyDataset, GenerationExhausted
from .geometry import project, project_many, rasterize_scene, sample_cameras, view_rotation
from .library import LEGO_BRICK_HEIGHT, get_library
from .model import BrickInstance, BrickShape, Library, Pose3, Scene, ViewAnnotation

CONTACT_TOL = 1e-6
OVERLAP_EPS = 1e-9
MASK64 = (1 << 64) - 1


def splitmix64(base_seed: int, index: int) -> int:
    """Per-scene seed derived from a dataset seed and the scene index."""
    z = (int(base_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class GenConfig:
    style: str = "clevr"
    brick_count_range: tuple = (4, 11)
    area: tuple = (-3.0, 3.0)
    max_retries: int = 50
    seed: int = 0
    # probability that a placement attempt targets the top of an existing brick
    stack_prob: float = 0.5
    stack_jitter: float = 0.45
    num_cameras: int = 4
    camera_distance: float = 12.0
    camera_jitter: float = 1.5
    focal: float = 1.0
    resolution: tuple = (224, 224)
    # stud-grid bounds for LEGO builds; 8-stud bricks do not fit the CLEVR area
    lego_area: tuple = (-5, 5)

    def __post_init__(self):
        lo, hi = self.brick_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"empty brick_count_range {self.brick_count_range}")
        if not self.area[1] > self.area[0]:
            raise ValueError(f"area {self.area} has no extent")
        if self.style not in ("clevr", "lego"):
            raise ValueError(f"unknown style {self.style!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("brick_count_range", "area", "resolution", "lego_area"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- CLEVR

@dataclass(frozen=True)
class Placed:
    shape: BrickShape
    position: tuple  # bounding-volume center
    yaw: float

    @property
    def base_z(self) -> float:
        return self.position[2] - self.shape.height / 2

    @property
    def top_z(self) -> float:
        return self.position[2] + self.shape.height / 2

    @property
    def footprint(self) -> Polygon:
        return world_footprint(self.shape, self.position[0], self.position[1], self.yaw)


def world_footprint(shape: BrickShape, x: float, y: float, yaw: float) -> Polygon:
    poly = affinity.rotate(Polygon(shape.footprint), yaw, origin=(0, 0), use_radians=True)
    return affinity.translate(poly, x, y)


@dataclass
class ClevrState:
    placed: list = field(default_factory=list)


def drop(state: ClevrState, shape: BrickShape, x: float, y: float, yaw: float):
    """Lower a brick vertically until first contact.

    Returns ``(placed, supporters)`` where ``supporters`` are the indices of
    bricks whose top face touches the candidate's bottom (empty on the ground).
    """
    fp = world_footprint(shape, x, y, yaw)
    overlapping = [k for k, p in enumerate(state.placed) if fp.intersection(p.footprint).area > OVERLAP_EPS]
    base = max((state.placed[k].top_z for k in overlapping), default=0.0)
    supporters = [k for k in overlapping if state.placed[k].top_z >= base - CONTACT_TOL]
    return Placed(shape, (x, y, base + shape.height / 2), yaw), supporters


def stability_check(state: ClevrState, candidate: Placed) -> bool:
    """True iff the candidate's center of mass projects inside its support polygon.

    The support polygon is the convex hull of the contact region: the whole
    footprint on the ground, otherwise the overlap with coplanar supporting
    top faces. Landing on a brick without a flat top is unstable.
    """
    fp = candidate.footprint
    com = fp.centroid
    if candidate.base_z <= CONTACT_TOL:
        return fp.convex_hull.covers(com)
    contacts = []
    for p in state.placed:
        if abs(p.top_z - candidate.base_z) > CONTACT_TOL:
            continue
        overlap = fp.intersection(p.footprint)
        if overlap.area <= OVERLAP_EPS:
            continue
        if not p.shape.flat_top:
            return False
        contacts.append(overlap)
    if not contacts:
        return False
    return unary_union(contacts).convex_hull.covers(com)


def _inside_area(poly: Polygon, area) -> bool:
    lo, hi = area
    return box(lo, lo, hi, hi).covers(poly)


def _sample_count(rng, config: GenConfig) -> int:
    lo, hi = config.brick_count_range
    return int(rng.integers(lo, hi + 1))


def generate_clevr_scene(library: Library, config: GenConfig, rng: np.random.Generator,
                         scene_id: str = "scene", count: int | None = None) -> Scene:
    n = _sample_count(rng, config) if count is None else count
    state = ClevrState()
    bricks, edges = [], []
    lo, hi = config.area
    for step in range(n):
        for _ in range(config.max_retries):
            shape = library.shapes[rng.integers(len(library.shapes))]
            texture = library.textures[rng.integers(len(library.textures))]
            yaw = rng.uniform(0.0, 2 * math.pi)
            flat = [p for p in state.placed if p.shape.flat_top]
            if flat and rng.random() < config.stack_prob:
                target = flat[rng.integers(len(flat))]
                x = target.position[0] + rng.uniform(-config.stack_jitter, config.stack_jitter)
                y = target.position[1] + rng.uniform(-config.stack_jitter, config.stack_jitter)
            else:
                x, y = rng.uniform(lo, hi), rng.uniform(lo, hi)
            cand, supporters = drop(state, shape, x, y, yaw)
            if not _inside_area(cand.footprint, config.area):
                continue
            if stability_check(state, cand):
                break
        else:
            raise GenerationExhausted(f"step {step}: no stable placement in {config.max_retries} tries")
        state.placed.append(cand)
        bricks.append(BrickInstance(shape.id, texture.id, Pose3(cand.position, yaw)))
        edges.extend((k, step) for k in supporters)
    cameras = frame_cameras(rng, config, bricks)
    return Scene(scene_id, library.name, bricks, edges, cameras,
                 meta={"style": "clevr", "config": config.to_dict()})


def in_frame(camera, points) -> bool:
    uvz = project_many(camera, points)
    return bool(np.all((uvz[:, 2] > 0) & (uvz[:, :2] >= 0.0).all(axis=1) & (uvz[:, :2] <= 1.0).all(axis=1)))


def frame_cameras(rng, config: GenConfig, bricks) -> list:
    """Cameras aimed at the box around the brick centers, with every center in every view.

    Camera sets are resampled up to ``max_retries`` times; a scene that
    cannot be framed raises GenerationExhausted and gets regenerated.
    """
    centers = np.array([b.pose.position for b in bricks], dtype=float)
    target = (centers.min(axis=0) + centers.max(axis=0)) / 2
    for _ in range(config.max_retries):
        cams = sample_cameras(rng, config.num_cameras, config.camera_distance, config.camera_jitter,
                              target=target, fx=config.focal, fy=config.focal,
                              width=config.resolution[1], height=config.resolution[0])
        if all(in_frame(c, centers) for c in cams):
            return cams
    raise GenerationExhausted(f"no camera set frames all {len(bricks)} bricks")


# ---------------------------------------------------------------- LEGO

@dataclass(frozen=True)
class LegoPose:
    shape_id: int
    gx: int  # world cell of the rotated bounding box's minimum corner
    gy: int
    layer: int
    rot: int  # quarter turns

    @property
    def yaw(self) -> float:
        return self.rot * math.pi / 2


def rotated_cells(shape: BrickShape, rot: int) -> list[tuple]:
    """Cells of ``shape`` after ``rot`` quarter turns, relative to the rotated box's min corner."""
    cells = np.array(shape.socket_bottom, dtype=float)
    w = cells[:, 0].max() + 1
    d = cells[:, 1].max() + 1
    centers = cells + 0.5 - np.array([w / 2, d / 2])
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][rot % 4]
    rx = c * centers[:, 0] - s * centers[:, 1]
    ry = s * centers[:, 0] + c * centers[:, 1]
    wr, dr = (w, d) if rot % 2 == 0 else (d, w)
    ix = np.rint(rx + wr / 2 - 0.5).astype(int)
    iy = np.rint(ry + dr / 2 - 0.5).astype(int)
    return sorted(zip(ix.tolist(), iy.tolist()))


def pose_cells(shape: BrickShape, pose: LegoPose) -> list[tuple]:
    return [(pose.gx + i, pose.gy + j, pose.layer) for i, j in rotated_cells(shape, pose.rot)]


def lego_center(shape: BrickShape, pose: LegoPose) -> tuple:
    cells = rotated_cells(shape, pose.rot)
    wr = max(i for i, _ in cells) + 1
    dr = max(j for _, j in cells) + 1
    return (pose.gx + wr / 2, pose.gy + dr / 2, pose.layer * shape.height + shape.height / 2)


@dataclass
class AssemblyState:
    library: Library
    occupied: dict = field(default_factory=dict)  # (x, y, layer) -> brick index
    placements: list = field(default_factory=list)

    def place(self, pose: LegoPose) -> list[int]:
        """Add a brick; returns indices of bricks it sits on (stud connections)."""
        shape = self.library.shape(pose.shape_id)
        idx = len(self.placements)
        below = set()
        for cell in pose_cells(shape, pose):
            if cell in self.occupied:
                raise ValueError(f"cell {cell} already occupied")
            x, y, layer = cell
            if (x, y, layer - 1) in self.occupied:
                below.add(self.occupied[(x, y, layer - 1)])
        for cell in pose_cells(shape, pose):
            self.occupied[cell] = idx
        self.placements.append(pose)
        return sorted(below)

    def exposed_studs(self) -> list[tuple]:
        return sorted((x, y, layer) for (x, y, layer) in self.occupied if (x, y, layer + 1) not in self.occupied)

    def column_clear(self, x, y, layer) -> bool:
        return not any((x, y, other) in self.occupied for other in self._layers_above(layer))

    def _layers_above(self, layer):
        top = max((c[2] for c in self.occupied), default=-1)
        return range(layer + 1, top + 1)


def feasible_poses(state: AssemblyState, shape: BrickShape) -> list[LegoPose]:
    """Collision-free poses in which at least one socket mates an exposed stud.

    Cells above a candidate must be free so the brick can be pressed on from
    above. Poses covering the same cells are merged, keeping the smallest
    rotation.
    """
    studs = state.exposed_studs()
    seen = {}
    for rot in range(4):
        cells = rotated_cells(shape, rot)
        for sx, sy, sl in studs:
            layer = sl + 1
            for ci, cj in cells:
                pose = LegoPose(shape.id, sx - ci, sy - cj, layer, rot)
                occ = pose_cells(shape, pose)
                key = (frozenset(occ), layer)
                if key in seen and seen[key].rot <= rot:
                    continue
                if any(c in state.occupied for c in occ):
                    continue
                if not all(state.column_clear(x, y, layer) for x, y, _ in occ):
                    continue
                seen[key] = pose
    return sorted(seen.values(), key=lambda p: (p.layer, p.gx, p.gy, p.rot))


def equivalent_rotations(shape: BrickShape, rot: int) -> list[int]:
    sym = shape.symmetry_order
    if sym in (0, 1):
        return [rot % 4]
    step = 4 // sym
    return sorted({(rot + k * step) % 4 for k in range(sym)})


def generate_lego_scene(library: Library, config: GenConfig, rng: np.random.Generator,
                        scene_id: str = "scene", count: int | None = None) -> Scene:
    n = _sample_count(rng, config) if count is None else count
    state = AssemblyState(library)
    bricks, edges = [], []
    for step in range(n):
        for _ in range(config.max_retries):
            shape = library.shapes[rng.integers(len(library.shapes))]
            if step == 0:
                rot = int(rng.integers(4))
                cells = rotated_cells(shape, rot)
                wr = max(i for i, _ in cells) + 1
                dr = max(j for _, j in cells) + 1
                gx = -(wr // 2) + int(rng.integers(-1, 2))
                gy = -(dr // 2) + int(rng.integers(-1, 2))
                pose = LegoPose(shape.id, gx, gy, 0, rot)
                break
            lo, hi = config.lego_area
            options = [p for p in feasible_poses(state, shape)
                       if all(lo <= x and x + 1 <= hi and lo <= y and y + 1 <= hi
                              for x, y, _ in pose_cells(shape, p))]
            if options:
                pose = options[rng.integers(len(options))]
                eq = equivalent_rotations(shape, pose.rot)
                pose = LegoPose(pose.shape_id, pose.gx, pose.gy, pose.layer, eq[rng.integers(len(eq))])
                break
        else:
            raise GenerationExhausted(f"step {step}: no feasible pose in {config.max_retries} tries")
        texture = library.textures[rng.integers(len(library.textures))]
        supporters = state.place(pose)
        bricks.append(BrickInstance(shape.id, texture.id, Pose3(lego_center(shape, pose), pose.yaw)))
        edges.extend((k, step) for k in supporters)
    cameras = frame_cameras(rng, config, bricks)
    return Scene(scene_id, library.name, bricks, edges, cameras,
                 meta={"style": "lego", "config": config.to_dict(),
                       "grid": [[p.gx, p.gy, p.layer, p.rot] for p in state.placements]})


def lego_pose_of(shape: BrickShape, pose3: Pose3) -> LegoPose:
    """Grid pose of a LEGO brick instance placed on the stud grid."""
    rot = int(round(pose3.yaw / (math.pi / 2))) % 4
    cells = rotated_cells(shape, rot)
    wr = max(i for i, _ in cells) + 1
    dr = max(j for _, j in cells) + 1
    x, y, z = pose3.position
    return LegoPose(shape.id, int(round(x - wr / 2)), int(round(y - dr / 2)),
                    int(round((z - shape.height / 2) / shape.height)), rot)


def generate_scene(config: GenConfig, index: int, library: Library | None = None,
                   attempts: int = 16) -> Scene:
    """Scene ``index`` of the dataset defined by ``config``.

    A scene whose generation exhausts its retries is regenerated from a
    seed derived from the failed one, so the result stays deterministic.
    """
    library = library or get_library(config.style)
    fn = generate_clevr_scene if config.style == "clevr" else generate_lego_scene
    seed = splitmix64(config.seed, index)
    count = _sample_count(np.random.default_rng(seed), config)
    for attempt in range(attempts):
        rng = np.random.default_rng(seed)
        try:
            scene = fn(library, config, rng, scene_id=f"{config.style}-{config.seed}-{index:06d}", count=count)
        except GenerationExhausted:
            seed = splitmix64(seed, attempt)
            continue
        return scene.replace(meta={**scene.meta, "index": index, "attempt": attempt})
    raise GenerationExhausted(f"scene {index}: {attempts} attempts exhausted")


# ---------------------------------------------------------------- annotation & stats

def annotate(scene: Scene, resolution=(224, 224), library: Library | None = None) -> Scene:
    library = library or get_library(scene.library_ref)
    per_view = [rasterize_scene(scene, cam, resolution, library) for cam in scene.cameras]
    rows = []
    for i, b in enumerate(scene.bricks):
        row = []
        for v, cam in enumerate(scene.cameras):
            mask, ratio = per_view[v][i]
            try:
                u, vv, _ = project(cam, b.pose.position)
                kp = (u, vv) if 0.0 <= u <= 1.0 and 0.0 <= vv <= 1.0 else None
            except BehindCamera:
                kp = None
            row.append(ViewAnnotation(kp, view_rotation(cam, b.pose.yaw), mask, ratio, ratio))
        rows.append(tuple(row))
    return scene.replace(annotations=tuple(rows))


def graph_depth(n: int, edges) -> int:
    """Vertices on the longest directed path (0 for an empty graph)."""
    if n == 0:
        return 0
    succ = [[] for _ in range(n)]
    indeg = [0] * n
    for i, j in edges:
        succ[i].append(j)
        indeg[j] += 1
    depth = [1] * n
    queue = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for w in succ[v]:
            depth[w] = max(depth[w], depth[v] + 1)
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    if seen != n:
        raise ValueError("graph has a cycle")
    return max(depth)


@dataclass(frozen=True)
class DatasetStats:
    scenes: int
    mean_brick_count: float
    mean_visibility: float
    mean_graph_depth: float

    def to_dict(self):
        return asdict(self)


def dataset_stats(scenes, resolution=(224, 224)) -> DatasetStats:
    scenes = list(scenes)
    if not scenes:
        raise EmptyDataset("dataset has no scenes")
    vis = []
    for s in scenes:
        if s.annotations is None:
            s = annotate(s, resolution)
        vis.extend(a.visible_ratio for row in s.annotations for a in row)
    return DatasetStats(
        len(scenes),
        float(np.mean([s.n for s in scenes])),
        float(np.mean(vis)) if vis else 0.0,
        float(np.mean([graph_depth(s.n, s.support_edges) for s in scenes])),
    )
