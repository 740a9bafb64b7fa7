"""Prediction-to-ground-truth matching and the evaluation metric suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, MissingAssignment
from .model import RATE_FIELDS, MetricsReport, PredictionSet, Scene, mask_iou
from .planner import Tolerances, brick_checks, execute_plan, gt_graph_from_supports

KPS_MSE_UNIT = 1e-3
TIE_RTOL = 1e-9


# ---------------------------------------------------------------- assignment

def _min_cost_rows(cost: np.ndarray) -> tuple[float, list[int]]:
    """Shortest-augmenting-path Hungarian for n <= m. Returns (total, column per row)."""
    n, m = cost.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, 0
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return float(sum(cost[i, cols[i]] for i in range(n))), cols


def _min_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    return _min_cost_rows(cost)[0]


def _lexmin_rows(cost: np.ndarray) -> list[int]:
    """Lexicographically smallest column vector among all optimal assignments (n <= m)."""
    n, m = cost.shape
    best = _min_cost(cost)
    rows = list(range(n))
    cols_left = list(range(m))
    out = []
    spent = 0.0
    for r in rows:
        rest_rows = rows[r + 1:]
        for c in cols_left:
            rest_cols = [k for k in cols_left if k != c]
            sub = cost[np.ix_(rest_rows, rest_cols)] if rest_rows else np.zeros((0, len(rest_cols)))
            total = spent + cost[r, c] + _min_cost(sub)
            if total <= best + TIE_RTOL * max(1.0, abs(best)):
                out.append(c)
                spent += cost[r, c]
                cols_left = rest_cols
                break
    return out


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n, m) (row, col) pairs.

    Among optimal assignments the lexicographically smallest is returned:
    smallest column sequence over rows when n <= m, smallest row sequence
    over columns otherwise.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    if n <= m:
        return [(i, j) for i, j in enumerate(_lexmin_rows(c))]
    return sorted((i, j) for j, i in enumerate(_lexmin_rows(c.T)))


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=float)
    return float(sum(c[i, j] for i, j in pairs))


# ---------------------------------------------------------------- matching

def match_cost(pred, gt, gt_annotations=None) -> float:
    """Shape mismatch + texture mismatch + mean keypoint distance + 0.1 * position error.

    The keypoint term averages over views where both sides have a keypoint;
    the position term needs a recovered pose on the prediction.
    """
    cost = float(pred.shape_id != gt.shape_id) + float(pred.texture_id != gt.texture_id)
    if gt_annotations is not None:
        d = [math.dist(pk, a.keypoint) for pk, a in zip(pred.keypoints, gt_annotations)
             if pk is not None and a.keypoint is not None]
        if d:
            cost += sum(d) / len(d)
    if pred.pose is not None:
        cost += 0.1 * math.dist(pred.pose.position, gt.pose.position)
    return cost


def cost_matrix(pred: PredictionSet, scene: Scene) -> np.ndarray:
    ann = scene.annotations
    return np.array([[match_cost(p, g, None if ann is None else ann[j]) for j, g in enumerate(scene.bricks)]
                     for p in pred.bricks]).reshape(len(pred.bricks), scene.n)


def match(pred: PredictionSet, scene: Scene) -> dict:
    """Predicted brick index -> gt brick index."""
    return dict(hungarian(cost_matrix(pred, scene)))


# ---------------------------------------------------------------- per-scene scores

@dataclass
class SceneScore:
    """Additive counts for one scene; summing scores pools them."""
    denom: int = 0  # max(n_gt, n_pred): unmatched bricks on either side are failures
    pos: int = 0
    rot: int = 0
    shape: int = 0
    texture: int = 0
    step: int = 0
    kps_sq: float = 0.0
    kps_n: int = 0
    iou: float = 0.0
    iou_n: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    prefix: int = 0
    type_prefix: int = 0
    count_ok: bool = False


def _check_assignment(assignment, n_pred, n_gt):
    if assignment is None:
        raise MissingAssignment("no assignment given")
    seen = set()
    for p, g in assignment.items():
        if not (0 <= p < n_pred and 0 <= g < n_gt) or g in seen:
            raise MissingAssignment(f"invalid pair ({p}, {g})")
        seen.add(g)


def edge_counts(pred_edges, gt_edges, assignment) -> tuple[int, int, int]:
    """(tp, fp, fn) of predicted edges mapped through the assignment."""
    mapped = set()
    fp = 0
    for i, j in pred_edges:
        if i in assignment and j in assignment:
            mapped.add((assignment[i], assignment[j]))
        else:
            fp += 1
    gt = set(gt_edges)
    tp = len(mapped & gt)
    return tp, fp + len(mapped - gt), len(gt - mapped)


def f1_score(tp, fp, fn) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def per_step_metrics(pred: PredictionSet, scene: Scene, assignment: dict, library,
                     tol: Tolerances = Tolerances()) -> SceneScore:
    """Per-brick accuracy counts, keypoint error, mask IoU and edge counts."""
    n_pred = len(pred.bricks)
    _check_assignment(assignment, n_pred, scene.n)
    s = SceneScore(denom=max(scene.n, n_pred), n_gt=scene.n)
    for p, g in assignment.items():
        shape_ok, tex_ok, pos_ok, rot_ok = brick_checks(pred.bricks[p], scene.bricks[g], library, tol)
        s.shape += shape_ok
        s.texture += tex_ok
        s.pos += pos_ok
        s.rot += rot_ok
        s.step += shape_ok and tex_ok and pos_ok and rot_ok
        if scene.annotations is None:
            continue
        pb = pred.bricks[p]
        for v, a in enumerate(scene.annotations[g]):
            if a.visible_ratio <= 0.0:
                continue
            s.iou += mask_iou(pb.masks[v], a.mask)
            s.iou_n += 1
            if a.keypoint is not None and pb.keypoints[v] is not None:
                s.kps_sq += (pb.keypoints[v][0] - a.keypoint[0]) ** 2 + (pb.keypoints[v][1] - a.keypoint[1]) ** 2
                s.kps_n += 1
    pred_edges = () if pred.graph is None else pred.graph.accepted
    s.tp, s.fp, s.fn = edge_counts(pred_edges, gt_graph_from_supports(scene), assignment)
    return s


def plan_prefix(flags) -> int:
    """Number of leading True flags."""
    k = 0
    for f in flags:
        if not f:
            break
        k += 1
    return k


def per_scene_metrics(steps, n_gt: int, predicted_count: int) -> tuple[int, int, bool]:
    """(prefix, type-only prefix, count correct) for one executed plan."""
    prefix = min(plan_prefix(st.correct for st in steps), n_gt)
    type_prefix = min(plan_prefix(st.type_correct for st in steps), n_gt)
    return prefix, type_prefix, predicted_count == n_gt


def evaluate_scene(pred: PredictionSet, scene: Scene, library, tol: Tolerances | None = None,
                   assignment: dict | None = None) -> SceneScore:
    """Match, replay the plan and score one scene."""
    if tol is None:
        tol = Tolerances.for_style(scene.meta.get("style", "clevr"))
    if assignment is None:
        assignment = match(pred, scene)
    s = per_step_metrics(pred, scene, assignment, library, tol)
    order = pred.order if pred.order is not None else tuple(range(len(pred.bricks)))
    steps = execute_plan(order, pred.bricks, assignment, scene, library, tol)
    s.prefix, s.type_prefix, s.count_ok = per_scene_metrics(steps, scene.n, pred.predicted_count)
    return s


def cca_distribution(prefixes, n_max: int | None = None) -> list[float]:
    """Normalized histogram of consecutive-correct prefix lengths over 0..n_max."""
    prefixes = [int(p) for p in prefixes]
    if not prefixes:
        raise EmptyInput("no prefixes")
    if n_max is None:
        n_max = max(prefixes)
    if min(prefixes) < 0 or max(prefixes) > n_max:
        raise ValueError(f"prefix outside 0..{n_max}")
    hist = np.bincount(prefixes, minlength=n_max + 1).astype(float)
    return (hist / hist.sum()).tolist()


def aggregate(scores) -> MetricsReport:
    """Pool scene scores into one report; rates are micro-averaged over bricks."""
    scores = list(scores)
    if not scores:
        raise EmptyInput("no scenes to aggregate")
    tot = SceneScore()
    prefixes, n_gts = [], []
    complete = per_scene = count = order = 0.0
    for s in scores:
        for name in ("denom", "pos", "rot", "shape", "texture", "step", "kps_sq", "kps_n",
                     "iou", "iou_n", "tp", "fp", "fn"):
            setattr(tot, name, getattr(tot, name) + getattr(s, name))
        complete += s.prefix / s.n_gt if s.n_gt else 1.0
        per_scene += s.prefix == s.n_gt
        count += s.count_ok
        order += s.type_prefix / s.n_gt if s.n_gt else 1.0
        prefixes.append(s.prefix)
        n_gts.append(s.n_gt)
    k = len(scores)

    def rate(x):
        return x / tot.denom if tot.denom else 1.0

    return MetricsReport(
        complete_rate=complete / k,
        per_scene_acc=per_scene / k,
        count_acc=count / k,
        order_cr=order / k,
        per_step_acc=rate(tot.step),
        pos_acc=rate(tot.pos),
        rot_acc=rate(tot.rot),
        shape_acc=rate(tot.shape),
        texture_acc=rate(tot.texture),
        miou=tot.iou / tot.iou_n if tot.iou_n else 1.0,
        kps_mse=float(tot.kps_sq / tot.kps_n / KPS_MSE_UNIT) if tot.kps_n else 0.0,
        edge_f1=f1_score(tot.tp, tot.fp, tot.fn),
        cca_histogram=tuple(cca_distribution(prefixes, max(n_gts))),
    )


def report_header() -> dict:
    return {"kps_mse_unit": KPS_MSE_UNIT, "rates": list(RATE_FIELDS),
            "averaging": "scene rates averaged over scenes; brick rates pooled over bricks"}
