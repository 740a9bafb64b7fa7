"""Noise model that turns ground-truth annotations into detector-like predictions."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from importlib import resources

import numpy as np

from .model import Mask, PredictedBrick, PredictionSet, Scene, mask_iou

PRESETS = ("noiseless", "mild", "harsh")


@dataclass(frozen=True)
class NoiseConfig:
    keypoint_sigma: float = 0.0  # normalized image units, per axis
    label_flip_prob: float = 0.0  # shape and texture flipped independently
    rotation_sigma: float = 0.0  # radians, continuous styles
    rotation_flip_prob: float = 0.0  # quarter-turn flips, discrete styles
    mask_shift_px: int = 0
    count_error_prob: float = 0.0
    drop_detection_prob: float = 0.0  # per (brick, view)
    seed: int = 0

    def __post_init__(self):
        for name in ("label_flip_prob", "rotation_flip_prob", "count_error_prob", "drop_detection_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0,1]")
        for name in ("keypoint_sigma", "rotation_sigma", "mask_shift_px"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown noise fields: {sorted(extra)}")
        kw = dict(d)
        if "mask_shift_px" in kw:
            kw["mask_shift_px"] = int(kw["mask_shift_px"])
        if "seed" in kw:
            kw["seed"] = int(kw["seed"])
        return cls(**kw)


def load_preset(name: str) -> NoiseConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("brickasm").joinpath("presets", f"{name}.json").read_text()
    return NoiseConfig.from_dict(json.loads(text))


def scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    """Generator keyed on (seed, scene id) so results do not depend on processing order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(scene_id.encode())])


def shift_mask(mask: Mask, dx: int, dy: int) -> Mask:
    """Translate a mask by (dx, dy) cells; cells pushed off the raster are lost."""
    if dx == 0 and dy == 0:
        return mask
    bm = mask.decode()
    out = np.zeros_like(bm)
    h, w = bm.shape
    if abs(dx) >= w or abs(dy) >= h:
        return Mask.empty(h, w)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = bm[src_r, src_c]
    return Mask.encode(out)


def _flip(rng, value, choices):
    others = [c for c in choices if c != value]
    return value if not others else int(others[rng.integers(len(others))])


def _perturb_brick(rng, scene: Scene, i: int, cfg: NoiseConfig, discrete: bool, shape_ids, texture_ids):
    b = scene.bricks[i]
    shape_id, texture_id = b.shape_id, b.texture_id
    if rng.random() < cfg.label_flip_prob:
        shape_id = _flip(rng, shape_id, shape_ids)
    if rng.random() < cfg.label_flip_prob:
        texture_id = _flip(rng, texture_id, texture_ids)
    kps, rots, masks, confs = [], [], [], []
    for a in scene.annotations[i]:
        angle = a.view_rotation
        if discrete:
            if rng.random() < cfg.rotation_flip_prob:
                angle += (math.pi / 2) * int(rng.integers(1, 4))
        elif cfg.rotation_sigma > 0:
            angle += rng.normal(0.0, cfg.rotation_sigma)
        kp = a.keypoint
        if kp is not None and cfg.keypoint_sigma > 0:
            noisy = np.clip(np.asarray(kp) + rng.normal(0.0, cfg.keypoint_sigma, 2), 0.0, 1.0)
            kp = (float(noisy[0]), float(noisy[1]))
        s = cfg.mask_shift_px
        mask = shift_mask(a.mask, int(rng.integers(-s, s + 1)), int(rng.integers(-s, s + 1))) if s else a.mask
        if rng.random() < cfg.drop_detection_prob:
            kps.append(None)
            rots.append((math.sin(angle), math.cos(angle)))
            masks.append(Mask.empty(a.mask.height, a.mask.width))
            confs.append(0.0)
            continue
        kps.append(kp)
        rots.append((math.sin(angle), math.cos(angle)))
        masks.append(mask)
        confs.append(mask_iou(mask, a.mask) * a.visible_ratio)
    return PredictedBrick(shape_id, texture_id, tuple(kps), tuple(rots), tuple(masks), tuple(confs),
                          source_index=i)


def perturb(scene: Scene, cfg: NoiseConfig = NoiseConfig(), library=None) -> PredictionSet:
    """Noisy detections for every brick of an annotated scene.

    Confidence per (brick, view) is the IoU between the perturbed and the
    true mask times the true visibility. A count error drops one detection
    or duplicates one, each with probability 1/2.
    """
    if scene.annotations is None:
        raise ValueError(f"scene {scene.scene_id} has no annotations")
    if library is None:
        from .library import get_library
        library = get_library(scene.library_ref)
    rng = scene_rng(cfg.seed, scene.scene_id)
    discrete = scene.meta.get("style") == "lego" or all(s.is_lego for s in library.shapes)
    shape_ids = [s.id for s in library.shapes]
    texture_ids = [t.id for t in library.textures]
    bricks = [_perturb_brick(rng, scene, i, cfg, discrete, shape_ids, texture_ids) for i in range(scene.n)]
    count = scene.n
    if rng.random() < cfg.count_error_prob:
        if scene.n > 1 and rng.random() < 0.5:
            count = scene.n - 1
            del bricks[int(rng.integers(scene.n))]
        else:
            count = scene.n + 1
            k = int(rng.integers(scene.n))
            dup = _perturb_brick(rng, scene, k, cfg, discrete, shape_ids, texture_ids)
            bricks.append(PredictedBrick(dup.shape_id, dup.texture_id, dup.keypoints, dup.rotations,
                                         dup.masks, dup.confidences, source_index=None))
    meta = {"noise": cfg.to_dict(), "style": scene.meta.get("style")}
    return PredictionSet(scene.scene_id, count, tuple(bricks), meta=meta)
