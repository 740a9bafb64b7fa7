import dataclasses
import itertools

import numpy as np
import pytest

from brickasm.errors import EmptyInput, MissingAssignment
from brickasm.library import clevr_library
from brickasm.model import RATE_FIELDS, Pose3, PredictedBrick, RelationGraph, ViewAnnotation, Mask
from brickasm.metrics import (SceneScore, aggregate, assignment_cost, cca_distribution, edge_counts,
                              evaluate_scene, f1_score, hungarian, match, match_cost, per_scene_metrics,
                              per_step_metrics, plan_prefix)
from brickasm.planner import StepResult
from brickasm.scenegen import GenConfig, annotate, generate_scene
from brickasm.solve import solve
from brickasm.stub import perturb

from oracles import brute_force_assignment

LIB = clevr_library()


# ---------------------------------------------------------------- assignment

def test_hungarian_examples():
    assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]
    assert hungarian([[2, 1], [1, 2]]) == [(0, 1), (1, 0)]
    assert hungarian(np.zeros((0, 3))) == []


def test_hungarian_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        c = rng.integers(0, 6, (n, m)).astype(float)
        pairs = hungarian(c)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
        assert assignment_cost(c, pairs) == pytest.approx(brute_force_assignment(c))


def test_hungarian_lexicographic_ties():
    assert hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    c = np.array([[0, 0, 1], [0, 0, 1]], float)
    assert hungarian(c) == [(0, 0), (1, 1)]
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = rng.integers(0, 3, (4, 4)).astype(float)
        best = brute_force_assignment(c)
        optimal = [p for p in itertools.permutations(range(4))
                   if abs(sum(c[i, p[i]] for i in range(4)) - best) < 1e-12]
        assert [j for _, j in hungarian(c)] == list(min(optimal))


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        hungarian([[np.inf, 1.0]])


# ---------------------------------------------------------------- matching cost

def _pb(shape, tex, kps=(None,), pose=None):
    return PredictedBrick(shape, tex, tuple(kps), ((0.0, 1.0),) * len(kps), (None,) * len(kps),
                          (1.0,) * len(kps), pose)


def test_match_cost_examples():
    scene = generate_scene(GenConfig(seed=1), 0)
    gt = scene.bricks[0]
    same = _pb(gt.shape_id, gt.texture_id, pose=gt.pose)
    assert match_cost(same, gt) == 0.0
    other_tex = (gt.texture_id + 1) % 16
    assert match_cost(_pb(gt.shape_id, other_tex, pose=gt.pose), gt) == 1.0
    # wrong shape; keypoint errors 0.5 and 0 (third view has no truth); 2 units off
    ann = [ViewAnnotation((0.2, 0.2), 0.0, Mask.empty(1, 1), 1, 1),
           ViewAnnotation((0.5, 0.5), 0.0, Mask.empty(1, 1), 1, 1),
           ViewAnnotation(None, 0.0, Mask.empty(1, 1), 0, 0)]
    x, y, z = gt.pose.position
    crafted = _pb((gt.shape_id + 1) % 6, gt.texture_id, kps=[(0.5, 0.6), (0.5, 0.5), (0.1, 0.1)],
                  pose=Pose3((x + 2.0, y, z), 0.0))
    assert match_cost(crafted, gt, ann) == pytest.approx(1.0 + (0.5 + 0.0) / 2 + 0.2)


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def solved():
    out = []
    for i in range(6):
        s = annotate(generate_scene(GenConfig(seed=2), i), resolution=(48, 48))
        out.append((s, solve(perturb(s), s, LIB, oracle=True)))
    return out


def test_perfect_report(solved):
    report = aggregate(evaluate_scene(p, s, LIB) for s, p in solved)
    for f in RATE_FIELDS:
        assert getattr(report, f) == 1.0, f
    assert report.kps_mse == 0.0
    assert report.invariant_violations() == []


def test_empty_graph_f1(solved):
    s, p = next((s, p) for s, p in solved if s.support_edges)
    empty = dataclasses.replace(p, graph=RelationGraph(p.graph.n, p.graph.probs, ()))
    sc = per_step_metrics(empty, s, match(empty, s), LIB)
    assert f1_score(sc.tp, sc.fp, sc.fn) == 0.0


def test_half_textures_flipped(solved):
    s, p = next((s, p) for s, p in solved if s.n % 2 == 0)
    bricks = list(p.bricks)
    for k in range(0, s.n, 2):
        b = bricks[k]
        bricks[k] = dataclasses.replace(b, texture_id=(b.texture_id + 1) % 16)
    flipped = dataclasses.replace(p, bricks=tuple(bricks))
    report = aggregate([evaluate_scene(flipped, s, LIB)])
    assert report.texture_acc == 0.5 and report.shape_acc == 1.0 and report.per_step_acc == 0.5


def test_missing_assignment(solved):
    s, p = solved[0]
    with pytest.raises(MissingAssignment):
        per_step_metrics(p, s, None, LIB)
    with pytest.raises(MissingAssignment):
        per_step_metrics(p, s, {0: 0, 1: 0}, LIB)


def test_edge_counts():
    assert edge_counts([(0, 1)], {(0, 1)}, {0: 0, 1: 1}) == (1, 0, 0)
    assert edge_counts([(0, 1)], {(1, 0)}, {0: 1, 1: 0}) == (1, 0, 0)
    assert edge_counts([(0, 2)], {(0, 1)}, {0: 0, 1: 1}) == (0, 1, 1)
    assert f1_score(0, 0, 0) == 1.0


# ---------------------------------------------------------------- scene-level

def _steps(flags):
    return [StepResult(k, k, True, True, True, True, f, f) for k, f in enumerate(flags)]


def test_prefix_rules():
    assert plan_prefix([True, True, False, True]) == 2
    assert per_scene_metrics(_steps([False] + [True] * 4), 5, 5) == (0, 0, True)


def test_three_scene_complete_rate():
    scores = [SceneScore(denom=n, n_gt=n, prefix=k, type_prefix=k, count_ok=True) for k, n in ((5, 5), (2, 4), (0, 6))]
    r = aggregate(scores)
    assert r.complete_rate == pytest.approx(0.5)
    assert r.per_scene_acc == pytest.approx(1 / 3)
    hist = r.cca_histogram
    assert len(hist) == 7 and hist[0] == hist[2] == hist[5] == pytest.approx(1 / 3)


def test_cca():
    assert cca_distribution([3, 3, 3], 3) == [0, 0, 0, 1.0]
    assert cca_distribution([0, 0, 2, 2]) == [0.5, 0.0, 0.5]
    rng = np.random.default_rng(0)
    assert sum(cca_distribution(rng.integers(0, 9, 50), 8)) == pytest.approx(1.0)
    with pytest.raises(EmptyInput):
        cca_distribution([])
    with pytest.raises(EmptyInput):
        aggregate([])


def test_bounds_on_noisy_pipeline():
    from brickasm.stub import load_preset
    scores = []
    for i in range(6):
        s = annotate(generate_scene(GenConfig(seed=8), i), resolution=(48, 48))
        p = solve(perturb(s, load_preset("harsh")), s, LIB, oracle=True)
        scores.append(evaluate_scene(p, s, LIB))
    r = aggregate(scores)
    assert r.invariant_violations() == []
    for f in RATE_FIELDS:
        assert 0.0 <= getattr(r, f) <= 1.0
    assert r.per_step_acc <= min(r.pos_acc, r.rot_acc, r.shape_acc, r.texture_acc)
