"""End-to-end recovery: detections -> poses -> relation graph -> assembly order."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .errors import NoFeasiblePose, NoVisibleViews
from .model import PredictedBrick, PredictionSet, Pose3, Scene, normalize_angle
from .planner import EDGE_THRESHOLD, build_plan, gt_graph_from_supports, topological_order
from .relgcn import edge_probabilities, node_features
from .scenegen import AssemblyState, lego_center
from .triangulate import (DEFAULT_THETA, merge_rotation_continuous, merge_rotation_discrete,
                          recover_position, snap_to_connection, snap_to_ground, world_yaws)

log = logging.getLogger(__name__)


def _fallback_yaw(brick: PredictedBrick, cameras) -> float:
    """World yaw from the single most confident view."""
    best = max(range(len(cameras)), key=lambda k: (brick.confidences[k], -k))
    return world_yaws([brick.rotations[best]], [cameras[best]])[0]


def recover_brick(brick: PredictedBrick, cameras, discrete: bool, theta: float = DEFAULT_THETA,
                  volume_center=(0.0, 0.0, 0.0)) -> PredictedBrick:
    """Fill in the pose of one detection; low_quality marks any fallback."""
    low = False
    try:
        rec = recover_position(brick.keypoints, brick.confidences, cameras, theta, volume_center)
        position, low = rec.position, rec.low_quality
    except NoVisibleViews:
        position, low = np.asarray(volume_center, dtype=float), True
    merge = merge_rotation_discrete if discrete else merge_rotation_continuous
    try:
        yaw = merge(brick.rotations, brick.confidences, cameras, theta)
    except NoVisibleViews:
        yaw, low = _fallback_yaw(brick, cameras), True
    pose = Pose3(tuple(float(c) for c in position), normalize_angle(yaw))
    return replace(brick, pose=pose, low_quality=low)


def oracle_probabilities(pred: PredictionSet, scene: Scene) -> np.ndarray:
    """Ground-truth indicator matrix routed through each detection's source brick."""
    gt = gt_graph_from_supports(scene)
    n = len(pred.bricks)
    src = [b.source_index for b in pred.bricks]
    probs = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b and src[a] is not None and src[b] is not None and (src[a], src[b]) in gt:
                probs[a, b] = 1.0
    return probs


def snap_lego(bricks: list, order, library) -> list:
    """Replace recovered LEGO poses with stud-grid poses, placing bricks in plan order."""
    state = AssemblyState(library)
    out = list(bricks)
    for step, k in enumerate(order):
        b = out[k]
        shape = library.shape(b.shape_id)
        try:
            if step == 0:
                lp = snap_to_ground(b.pose.position, b.pose.yaw, shape)
            else:
                lp = snap_to_connection(b.pose.position, b.pose.yaw, state, shape)
            state.place(lp)
        except (NoFeasiblePose, ValueError) as exc:
            log.debug("brick %d left unsnapped: %s", k, exc)
            out[k] = replace(b, low_quality=True)
            continue
        out[k] = replace(b, pose=Pose3(lego_center(shape, lp), lp.yaw))
    return out


def solve(pred: PredictionSet, scene: Scene, library, params: dict | None = None, oracle: bool = False,
          theta: float = DEFAULT_THETA, threshold: float = EDGE_THRESHOLD) -> PredictionSet:
    """Recover poses, predict the relation graph and order the bricks.

    ``scene`` supplies the cameras; with ``oracle`` it also supplies the
    true support graph in place of the network.
    """
    if not oracle and params is None:
        raise ValueError("either gcn params or oracle mode is required")
    style = scene.meta.get("style") or pred.meta.get("style") or "clevr"
    discrete = style == "lego"
    bricks = [recover_brick(b, scene.cameras, discrete, theta) for b in pred.bricks]
    n = len(bricks)
    if oracle:
        probs = oracle_probabilities(pred, scene)
    elif n:
        feats = node_features(library, [(b.shape_id, b.texture_id, b.pose.position, b.pose.yaw) for b in bricks])
        probs = edge_probabilities(params, feats)
    else:
        probs = np.zeros((0, 0))
    graph = build_plan(probs, n, threshold)
    order = topological_order(graph)
    if discrete:
        bricks = snap_lego(bricks, order, library)
    meta = {**pred.meta, "solver": {"theta": theta, "threshold": threshold, "oracle": oracle}}
    return pred.replace(bricks=tuple(bricks), graph=graph, order=tuple(order), meta=meta)
