"""Core domain types, their JSON encoding, and scene validation.

All types are frozen dataclasses. Array-valued fields are stored as
read-only numpy arrays so values can be shared between workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
CONTINUOUS = 0  # symmetry_order value for yaw-invariant shapes
POINTS_PER_SHAPE = 1024
GROUND_TOL = 1e-6
FORMAT_VERSION = 1


def normalize_angle(a: float) -> float:
    """Map an angle into [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:  # fmod of tiny negatives can round up to 2*pi
        a = 0.0
    return a


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------- masks

@dataclass(frozen=True)
class Mask:
    """Binary raster stored as row-major run lengths.

    ``runs`` alternate between 0s and 1s and always start with a run of 0s
    (possibly of length zero).
    """

    height: int
    width: int
    runs: tuple

    @classmethod
    def encode(cls, bitmap: np.ndarray) -> "Mask":
        bitmap = np.asarray(bitmap, dtype=bool)
        h, w = bitmap.shape
        flat = bitmap.ravel()
        if flat.size == 0:
            return cls(h, w, (0,))
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs.insert(0, 0)
        return cls(h, w, tuple(int(r) for r in runs))

    @classmethod
    def empty(cls, height: int, width: int) -> "Mask":
        return cls(height, width, (height * width,))

    @classmethod
    def from_cells(cls, height: int, width: int, cells) -> "Mask":
        bitmap = np.zeros(height * width, dtype=bool)
        bitmap[np.asarray(cells, dtype=np.int64)] = True
        return cls.encode(bitmap.reshape(height, width))

    def decode(self) -> np.ndarray:
        flat = np.zeros(sum(self.runs), dtype=bool)
        pos = 0
        for k, r in enumerate(self.runs):
            if k % 2 == 1:
                flat[pos:pos + r] = True
            pos += r
        return flat.reshape(self.height, self.width)

    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    def is_valid(self) -> bool:
        return (all(isinstance(r, int) and r >= 0 for r in self.runs)
                and sum(self.runs) == self.height * self.width)

    def to_dict(self):
        return {"height": self.height, "width": self.width, "runs": list(self.runs)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["height"]), int(d["width"]), tuple(int(r) for r in d["runs"]))


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union; two empty masks give 0."""
    da, db = a.decode(), b.decode()
    union = np.count_nonzero(da | db)
    if union == 0:
        return 0.0
    return np.count_nonzero(da & db) / union


# ---------------------------------------------------------------- library

@dataclass(frozen=True)
class BrickShape:
    id: int
    name: str
    footprint: tuple  # ((x, y), ...) counter-clockwise, brick-local frame
    height: float
    point_cloud: np.ndarray = field(compare=False, repr=False)
    symmetry_order: int = 1
    flat_top: bool = True
    stud_top: Optional[tuple] = None
    socket_bottom: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "point_cloud", _frozen(self.point_cloud))
        object.__setattr__(self, "footprint", tuple(tuple(map(float, p)) for p in self.footprint))
        if self.stud_top is not None:
            object.__setattr__(self, "stud_top", tuple(tuple(map(int, c)) for c in self.stud_top))
        if self.socket_bottom is not None:
            object.__setattr__(self, "socket_bottom",
                               tuple(tuple(map(int, c)) for c in self.socket_bottom))

    @property
    def is_lego(self) -> bool:
        return self.stud_top is not None

    def invariant_violations(self) -> list[str]:
        from shapely.geometry import Polygon

        out = []
        if self.point_cloud.shape != (POINTS_PER_SHAPE, 3):
            out.append(f"point_cloud has shape {self.point_cloud.shape}, expected (1024, 3)")
        if not self.height > 0:
            out.append("height must be positive")
        poly = Polygon(self.footprint)
        if len(self.footprint) < 3 or not poly.is_valid or poly.area <= 0:
            out.append("footprint is not a simple polygon with positive area")
        if self.symmetry_order not in (1, 2, 4, CONTINUOUS):
            out.append(f"symmetry_order {self.symmetry_order} not in {{1,2,4,continuous}}")
        return out

    def to_dict(self):
        return {
            "id": self.id,
            "name": self.name,
            "footprint": [list(p) for p in self.footprint],
            "height": self.height,
            "point_cloud": self.point_cloud.tolist(),
            "symmetry_order": "continuous" if self.symmetry_order == CONTINUOUS else self.symmetry_order,
            "flat_top": self.flat_top,
            "stud_top": None if self.stud_top is None else [list(c) for c in self.stud_top],
            "socket_bottom": None if self.socket_bottom is None else [list(c) for c in self.socket_bottom],
        }

    @classmethod
    def from_dict(cls, d):
        sym = d["symmetry_order"]
        return cls(
            id=int(d["id"]),
            name=d["name"],
            footprint=d["footprint"],
            height=float(d["height"]),
            point_cloud=np.array(d["point_cloud"], dtype=float),
            symmetry_order=CONTINUOUS if sym == "continuous" else int(sym),
            flat_top=bool(d.get("flat_top", True)),
            stud_top=d.get("stud_top"),
            socket_bottom=d.get("socket_bottom"),
        )


@dataclass(frozen=True)
class BrickTexture:
    id: int
    name: str
    rgb: tuple

    def to_dict(self):
        return {"id": self.id, "name": self.name, "rgb": list(self.rgb)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), d["name"], tuple(float(c) for c in d["rgb"]))


@dataclass(frozen=True)
class Library:
    name: str
    shapes: tuple
    textures: tuple

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "textures", tuple(self.textures))
        shape_ids = [s.id for s in self.shapes]
        tex_ids = [t.id for t in self.textures]
        if len(set(shape_ids)) != len(shape_ids):
            raise ValueError("duplicate shape ids in library")
        if len(set(tex_ids)) != len(tex_ids):
            raise ValueError("duplicate texture ids in library")
        object.__setattr__(self, "_shape_index", {s.id: s for s in self.shapes})
        object.__setattr__(self, "_texture_index", {t.id: t for t in self.textures})

    def shape(self, shape_id: int) -> BrickShape:
        return self._shape_index[shape_id]

    def texture(self, texture_id: int) -> BrickTexture:
        return self._texture_index[texture_id]

    def has_shape(self, shape_id) -> bool:
        return shape_id in self._shape_index

    def has_texture(self, texture_id) -> bool:
        return texture_id in self._texture_index

    @property
    def category_count(self) -> int:
        return len(self.shapes) * len(self.textures)

    def shape_position(self, shape_id) -> int:
        return [s.id for s in self.shapes].index(shape_id)

    def texture_position(self, texture_id) -> int:
        return [t.id for t in self.textures].index(texture_id)

    def to_dict(self):
        return {
            "format": "library",
            "version": FORMAT_VERSION,
            "name": self.name,
            "shapes": [s.to_dict() for s in self.shapes],
            "textures": [t.to_dict() for t in self.textures],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(BrickShape.from_dict(s) for s in d["shapes"]),
                   tuple(BrickTexture.from_dict(t) for t in d["textures"]))


# ---------------------------------------------------------------- scene

@dataclass(frozen=True)
class Pose3:
    position: tuple
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def to_dict(self):
        return {"position": list(self.position), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["position"]), d["yaw"])


@dataclass(frozen=True)
class BrickInstance:
    shape_id: int
    texture_id: int
    pose: Pose3

    def to_dict(self):
        return {"shape_id": self.shape_id, "texture_id": self.texture_id, "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["shape_id"]), int(d["texture_id"]), Pose3.from_dict(d["pose"]))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world->camera extrinsics (x right, y down, z forward).

    Intrinsics are in normalized image coordinates: a keypoint (u, v) in
    [0, 1]^2 covers the raster of ``height`` x ``width`` cells.
    """

    rotation: np.ndarray = field(compare=False)
    translation: np.ndarray = field(compare=False)
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.5
    cy: float = 0.5
    width: int = 224
    height: int = 224

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def azimuth(self) -> float:
        c = self.center
        return normalize_angle(math.atan2(c[1], c[0]))

    def is_orthonormal(self, tol=1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r @ r.T, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class ViewAnnotation:
    keypoint: Optional[tuple]  # None when the center projects behind or outside the camera
    view_rotation: float
    mask: Mask
    visible_ratio: float
    gt_confidence: float

    def to_dict(self):
        return {
            "keypoint": None if self.keypoint is None else list(self.keypoint),
            "view_rotation": self.view_rotation,
            "mask": self.mask.to_dict(),
            "visible_ratio": self.visible_ratio,
            "gt_confidence": self.gt_confidence,
        }

    @classmethod
    def from_dict(cls, d):
        kp = d["keypoint"]
        return cls(None if kp is None else (float(kp[0]), float(kp[1])), float(d["view_rotation"]),
                   Mask.from_dict(d["mask"]), float(d["visible_ratio"]), float(d["gt_confidence"]))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    library_ref: str
    bricks: tuple
    support_edges: tuple
    cameras: tuple
    annotations: Optional[tuple] = None  # annotations[brick][view]
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bricks", tuple(self.bricks))
        object.__setattr__(self, "support_edges", tuple((int(i), int(j)) for i, j in self.support_edges))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.annotations is not None:
            object.__setattr__(self, "annotations", tuple(tuple(row) for row in self.annotations))

    @property
    def n(self) -> int:
        return len(self.bricks)

    def replace(self, **kw) -> "Scene":
        from dataclasses import replace
        return replace(self, **kw)

    def to_dict(self):
        return {
            "format": "scene",
            "version": FORMAT_VERSION,
            "scene_id": self.scene_id,
            "library_ref": self.library_ref,
            "bricks": [b.to_dict() for b in self.bricks],
            "support_edges": [list(e) for e in self.support_edges],
            "cameras": [c.to_dict() for c in self.cameras],
            "annotations": None if self.annotations is None
            else [[a.to_dict() for a in row] for row in self.annotations],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d):
        ann = d.get("annotations")
        return cls(
            d["scene_id"], d["library_ref"],
            tuple(BrickInstance.from_dict(b) for b in d["bricks"]),
            tuple(tuple(e) for e in d["support_edges"]),
            tuple(Camera.from_dict(c) for c in d["cameras"]),
            None if ann is None else tuple(tuple(ViewAnnotation.from_dict(a) for a in row) for row in ann),
            d.get("meta", {}),
        )


# ---------------------------------------------------------------- predictions

@dataclass(frozen=True)
class PredictedBrick:
    shape_id: int
    texture_id: int
    keypoints: tuple  # per view: (u, v) or None
    rotations: tuple  # per view: (sin, cos)
    masks: tuple  # per view: Mask
    confidences: tuple  # per view
    pose: Optional[Pose3] = None
    low_quality: bool = False
    source_index: Optional[int] = None  # gt brick this detection came from (stub bookkeeping only)

    def view_angles(self) -> list[float]:
        """Per-view rotation angles after normalizing each (sin, cos) pair."""
        out = []
        for s, c in self.rotations:
            r = math.hypot(s, c)
            if r == 0.0:
                out.append(0.0)
            else:
                out.append(normalize_angle(math.atan2(s / r, c / r)))
        return out

    def to_dict(self):
        return {
            "shape_id": self.shape_id,
            "texture_id": self.texture_id,
            "keypoints": [None if k is None else list(k) for k in self.keypoints],
            "rotations": [list(r) for r in self.rotations],
            "masks": [m.to_dict() for m in self.masks],
            "confidences": list(self.confidences),
            "pose": None if self.pose is None else self.pose.to_dict(),
            "low_quality": self.low_quality,
            "source_index": self.source_index,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["shape_id"]), int(d["texture_id"]),
            tuple(None if k is None else (float(k[0]), float(k[1])) for k in d["keypoints"]),
            tuple((float(r[0]), float(r[1])) for r in d["rotations"]),
            tuple(Mask.from_dict(m) for m in d["masks"]),
            tuple(float(c) for c in d["confidences"]),
            None if d.get("pose") is None else Pose3.from_dict(d["pose"]),
            bool(d.get("low_quality", False)),
            d.get("source_index"),
        )


@dataclass(frozen=True)
class RelationGraph:
    n: int
    probs: np.ndarray = field(compare=False)
    accepted: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs).reshape(self.n, self.n))
        object.__setattr__(self, "accepted", tuple((int(i), int(j)) for i, j in self.accepted))

    def to_dict(self):
        return {"n": self.n, "probs": self.probs.tolist(), "accepted": [list(e) for e in self.accepted]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n"]), np.array(d["probs"], dtype=float).reshape(int(d["n"]), int(d["n"])),
                   tuple(tuple(e) for e in d["accepted"]))


@dataclass(frozen=True)
class PredictionSet:
    scene_id: str
    predicted_count: int
    bricks: tuple
    graph: Optional[RelationGraph] = None
    order: Optional[tuple] = None
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bricks", tuple(self.bricks))
        if self.order is not None:
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))

    def replace(self, **kw) -> "PredictionSet":
        from dataclasses import replace
        return replace(self, **kw)

    def to_dict(self):
        return {
            "format": "prediction",
            "version": FORMAT_VERSION,
            "scene_id": self.scene_id,
            "predicted_count": self.predicted_count,
            "bricks": [b.to_dict() for b in self.bricks],
            "graph": None if self.graph is None else self.graph.to_dict(),
            "order": None if self.order is None else list(self.order),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["scene_id"], int(d["predicted_count"]),
            tuple(PredictedBrick.from_dict(b) for b in d["bricks"]),
            None if d.get("graph") is None else RelationGraph.from_dict(d["graph"]),
            None if d.get("order") is None else tuple(d["order"]),
            d.get("meta", {}),
        )


# ---------------------------------------------------------------- metrics

RATE_FIELDS = ("complete_rate", "per_scene_acc", "count_acc", "order_cr", "per_step_acc",
               "pos_acc", "rot_acc", "shape_acc", "texture_acc", "miou", "edge_f1")


@dataclass(frozen=True)
class MetricsReport:
    complete_rate: float
    per_scene_acc: float
    count_acc: float
    order_cr: float
    per_step_acc: float
    pos_acc: float
    rot_acc: float
    shape_acc: float
    texture_acc: float
    miou: float
    kps_mse: float  # units of 1e-3 squared normalized image distance
    edge_f1: float
    cca_histogram: tuple

    def invariant_violations(self) -> list[str]:
        out = [f"{name}={getattr(self, name)} outside [0,1]"
               for name in RATE_FIELDS if not 0.0 <= getattr(self, name) <= 1.0]
        if abs(sum(self.cca_histogram) - 1.0) > 1e-9:
            out.append("cca_histogram does not sum to 1")
        return out

    def to_dict(self):
        d = {name: getattr(self, name) for name in RATE_FIELDS}
        d["kps_mse"] = self.kps_mse
        d["cca_histogram"] = list(self.cca_histogram)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {name: float(d[name]) for name in RATE_FIELDS}
        return cls(kps_mse=float(d["kps_mse"]), cca_histogram=tuple(float(p) for p in d["cca_histogram"]), **kw)


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.where}: {self.message}"


def find_cycle(n: int, edges: Sequence[tuple]) -> Optional[list[int]]:
    """Return the vertices of one directed cycle, or None if the graph is acyclic."""
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
    color = [0] * n
    parent = [-1] * n
    for root in range(n):
        if color[root]:
            continue
        stack = [(root, iter(adj[root]))]
        color[root] = 1
        while stack:
            v, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[v] = 2
                stack.pop()
            elif color[nxt] == 0:
                color[nxt] = 1
                parent[nxt] = v
                stack.append((nxt, iter(adj[nxt])))
            elif color[nxt] == 1:
                cycle = [v]
                while cycle[-1] != nxt:
                    cycle.append(parent[cycle[-1]])
                return cycle[::-1]
    return None


def validate_scene(scene: Scene, library: Optional[Library] = None) -> list[Violation]:
    """Check every scene invariant; returns an empty list for a valid scene."""
    if library is None:
        from .library import get_library
        library = get_library(scene.library_ref)
    out: list[Violation] = []
    n = scene.n

    for i, b in enumerate(scene.bricks):
        if not library.has_shape(b.shape_id):
            out.append(Violation("unknown_shape", f"brick {i}", f"shape id {b.shape_id} not in library"))
        if not library.has_texture(b.texture_id):
            out.append(Violation("unknown_texture", f"brick {i}", f"texture id {b.texture_id} not in library"))
        if not 0.0 <= b.pose.yaw < TWO_PI:
            out.append(Violation("yaw_range", f"brick {i}", "yaw outside [0, 2pi)"))

    edge_ok = True
    for i, j in scene.support_edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            out.append(Violation("edge_index", f"edge ({i},{j})", "endpoint out of range or self-loop"))
            edge_ok = False
    if edge_ok:
        cycle = find_cycle(n, scene.support_edges)
        if cycle is not None:
            out.append(Violation("acyclicity", "support_edges",
                                 "support cycle through bricks " + "->".join(map(str, cycle + cycle[:1]))))
        else:
            for i, j in scene.support_edges:
                if i >= j:
                    out.append(Violation("ordering", f"edge ({i},{j})",
                                         f"supporter {i} is not placed before brick {j}"))
        incoming = {j for _, j in scene.support_edges}
        for k, b in enumerate(scene.bricks):
            if k in incoming or not library.has_shape(b.shape_id):
                continue
            h = library.shape(b.shape_id).height
            if abs(b.pose.position[2] - h / 2.0) > GROUND_TOL:
                out.append(Violation("unsupported", f"brick {k}",
                                     "neither resting on the ground nor supported by another brick"))

    for v, cam in enumerate(scene.cameras):
        if not cam.is_orthonormal():
            out.append(Violation("camera_rotation", f"camera {v}", "rotation is not orthonormal with det +1"))

    if scene.annotations is not None:
        if len(scene.annotations) != n:
            out.append(Violation("annotation_shape", "annotations", f"{len(scene.annotations)} rows for {n} bricks"))
        for i, row in enumerate(scene.annotations):
            if len(row) != len(scene.cameras):
                out.append(Violation("annotation_shape", f"annotations[{i}]",
                                     f"{len(row)} views for {len(scene.cameras)} cameras"))
            for v, a in enumerate(row):
                where = f"annotations[{i}][{v}]"
                if not a.mask.is_valid():
                    out.append(Violation("mask_rle", where, "RLE does not decode to H*W cells"))
                if not 0.0 <= a.visible_ratio <= 1.0:
                    out.append(Violation("visible_ratio", where, "visible_ratio outside [0,1]"))
                if not 0.0 <= a.gt_confidence <= 1.0:
                    out.append(Violation("gt_confidence", where, "gt_confidence outside [0,1]"))
                if a.keypoint is not None and not all(0.0 <= c <= 1.0 for c in a.keypoint):
                    out.append(Violation("keypoint_range", where, "keypoint outside [0,1]^2"))
    return out
