"""Relation graph to assembly plan: greedy DAG building, ordering and step checks."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import CyclicGraph
from .model import RelationGraph, Scene
from .triangulate import yaw_error

EDGE_THRESHOLD = 0.5


def gt_graph_from_supports(scene: Scene) -> set[tuple]:
    """Directed edges (supporter, supported) for every direct contact."""
    return {(int(i), int(j)) for i, j in scene.support_edges}


def indicator_matrix(n: int, edges) -> np.ndarray:
    m = np.zeros((n, n))
    for i, j in edges:
        m[i, j] = 1.0
    return m


def _reaches(adj, start, target) -> bool:
    stack, seen = [start], {start}
    while stack:
        v = stack.pop()
        if v == target:
            return True
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return False


def _reach_count(adj, start) -> int:
    stack, seen = [start], {start}
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen)


@dataclass(frozen=True)
class PlanTrace:
    graph: RelationGraph
    steps: tuple  # ((i, j, p, "accept" | "cycle"), ...) in processing order
    stopped_at: int | None  # index into the sorted edge list where processing stopped


def sorted_edges(probs: np.ndarray) -> list[tuple]:
    n = probs.shape[0]
    edges = [(float(probs[i, j]), i, j) for i in range(n) for j in range(n) if i != j]
    edges.sort(key=lambda e: (-e[0], e[1], e[2]))
    return edges


def build_plan_trace(probs, n: int | None = None, threshold: float = EDGE_THRESHOLD,
                     single_root: bool = False) -> PlanTrace:
    """Greedy acyclic edge selection with its decision trace.

    Edges are taken in descending probability (ties by (i, j)); an edge that
    would close a directed cycle is skipped. Processing stops at the first
    edge with probability <= ``threshold`` once the graph is rooted. Rooted
    means a virtual root feeds every vertex without accepted in-edges, so
    forests qualify; with ``single_root`` a real vertex must reach all others
    and low-probability edges keep being added until one does.
    """
    probs = np.asarray(probs, dtype=float)
    n = probs.shape[0] if n is None else n
    adj = [[] for _ in range(n)]
    accepted, steps = [], []
    stopped = None
    for k, (p, i, j) in enumerate(sorted_edges(probs)):
        if p <= threshold:
            rooted = (not single_root) or any(_reach_count(adj, v) == n for v in range(n))
            if rooted:
                stopped = k
                break
        if _reaches(adj, j, i):
            steps.append((i, j, p, "cycle"))
            continue
        adj[i].append(j)
        accepted.append((i, j))
        steps.append((i, j, p, "accept"))
    return PlanTrace(RelationGraph(n, probs, tuple(accepted)), tuple(steps), stopped)


def build_plan(probs, n: int | None = None, threshold: float = EDGE_THRESHOLD,
               single_root: bool = False) -> RelationGraph:
    return build_plan_trace(probs, n, threshold, single_root).graph


def topological_order(graph: RelationGraph) -> list[int]:
    """Placement order honoring every accepted edge.

    Among placeable bricks, the one whose strongest accepted incoming edge
    has the highest probability goes first (bricks without one score 0),
    then the lower index.
    """
    n = graph.n
    indeg = [0] * n
    succ = [[] for _ in range(n)]
    key = [0.0] * n
    for i, j in graph.accepted:
        indeg[j] += 1
        succ[i].append(j)
        key[j] = max(key[j], float(graph.probs[i, j]))
    heap = [(-key[v], v) for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, (-key[w], w))
    if len(order) != n:
        raise CyclicGraph("accepted edges contain a cycle")
    return order


@dataclass(frozen=True)
class Tolerances:
    position: float = 0.25
    rotation: float = math.radians(15.0)

    @classmethod
    def for_style(cls, style: str) -> "Tolerances":
        if style == "lego":
            return cls(position=1e-6, rotation=1e-6)
        return cls()


@dataclass(frozen=True)
class StepResult:
    pred_index: int
    gt_index: int | None
    shape_ok: bool
    texture_ok: bool
    position_ok: bool
    rotation_ok: bool
    predecessors_ok: bool
    type_predecessors_ok: bool

    @property
    def correct(self) -> bool:
        return (self.gt_index is not None and self.shape_ok and self.texture_ok and self.position_ok
                and self.rotation_ok and self.predecessors_ok)

    @property
    def type_correct(self) -> bool:
        return self.gt_index is not None and self.shape_ok and self.texture_ok and self.type_predecessors_ok


def brick_checks(pred, gt, library, tol: Tolerances):
    """(shape_ok, texture_ok, position_ok, rotation_ok) for a matched pair."""
    shape_ok = pred.shape_id == gt.shape_id
    texture_ok = pred.texture_id == gt.texture_id
    if pred.pose is None:
        return shape_ok, texture_ok, False, False
    err = float(np.linalg.norm(np.subtract(pred.pose.position, gt.pose.position)))
    sym = library.shape(gt.shape_id).symmetry_order
    rot_ok = yaw_error(pred.pose.yaw, gt.pose.yaw, sym) < tol.rotation
    return shape_ok, texture_ok, err < tol.position, rot_ok


def execute_plan(order, pred_bricks, assignment: dict, scene: Scene, library,
                 tol: Tolerances = Tolerances()) -> list[StepResult]:
    """Replay a plan against the ground truth, one step per predicted brick.

    ``assignment`` maps predicted brick index -> gt brick index. A step is
    correct when its gt brick matches in type and pose and every gt
    supporter of it was placed correctly at an earlier step.
    """
    preds_of = {j: [] for j in range(scene.n)}
    for i, j in scene.support_edges:
        preds_of[j].append(i)
    placed, placed_type = set(), set()
    out = []
    for p in order:
        g = assignment.get(p)
        if g is None:
            out.append(StepResult(p, None, False, False, False, False, False, False))
            continue
        s_ok, t_ok, pos_ok, rot_ok = brick_checks(pred_bricks[p], scene.bricks[g], library, tol)
        pred_ok = all(k in placed for k in preds_of[g])
        type_pred_ok = all(k in placed_type for k in preds_of[g])
        step = StepResult(p, g, s_ok, t_ok, pos_ok, rot_ok, pred_ok, type_pred_ok)
        if step.correct:
            placed.add(g)
        if step.type_correct:
            placed_type.add(g)
        out.append(step)
    return out
