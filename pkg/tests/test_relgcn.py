import math

import numpy as np
import pytest

from brickasm.errors import NonFiniteLoss
from brickasm.library import clevr_library
from brickasm.relgcn import (TrainConfig, backward, edge_logits, edge_pairs, edge_prior, edge_probabilities,
                             graph_loss, graph_loss_logits, init_params, load_params, message_pass,
                             node_features, params_from_dict, params_to_dict, save_params, scene_features,
                             scene_loss_and_grads, sigmoid, train)
from brickasm.scenegen import GenConfig, generate_scene

from oracles import gcn_forward

LIB = clevr_library()


def small_params(f=8, hidden=6, seed=0, scale=1.0):
    p = init_params(f, hidden, 2, seed)
    return {k: v * scale for k, v in p.items()}


def rand_features(n, f=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, f))


# ---------------------------------------------------------------- features

def test_node_features_layout():
    s = generate_scene(GenConfig(seed=2), 0)
    f = scene_features(LIB, s)
    assert f.shape == (s.n, 6 + 16 + 5)
    assert np.all(f[:, :6].sum(1) == 1) and np.all(f[:, 6:22].sum(1) == 1)
    assert np.allclose(f[:, 25] ** 2 + f[:, 26] ** 2, 1.0)
    rows = [(b.shape_id, b.texture_id, b.pose.position, b.pose.yaw) for b in s.bricks]
    assert np.array_equal(f, node_features(LIB, rows))


# ---------------------------------------------------------------- forward

def test_single_node_has_no_edges():
    e, cache = message_pass(small_params(), rand_features(1))
    assert e.shape[0] == 0
    assert np.array_equal(cache["p_final"], rand_features(1))


def test_zero_weights():
    p = {k: np.zeros_like(v) for k, v in small_params().items()}
    e, _ = message_pass(p, rand_features(2))
    assert e.shape == (2, 8) and not e.any()
    probs = edge_probabilities(p, rand_features(4))
    off = ~np.eye(4, dtype=bool)
    assert np.all(probs[off] == 0.5)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_forward_matches_oracle(n):
    params = small_params(seed=n)
    feats = rand_features(n, seed=n)
    e, _ = message_pass(params, feats)
    oe, oprobs = gcn_forward(params, feats)
    src, dst = edge_pairs(n)
    for row, (i, j) in enumerate(zip(src, dst)):
        assert np.allclose(e[row], oe[(i, j)], atol=1e-12)
    assert np.allclose(edge_probabilities(params, feats), oprobs, atol=1e-12)


def test_permutation_equivariance():
    params = small_params(seed=3)
    feats = rand_features(5, seed=3)
    perm = np.random.default_rng(0).permutation(5)
    a = edge_probabilities(params, feats)
    b = edge_probabilities(params, feats[perm])
    assert np.allclose(b, a[np.ix_(perm, perm)], atol=1e-12)


# ---------------------------------------------------------------- loss

def test_loss_of_perfect_prediction():
    gt = [(0, 1), (1, 2)]
    probs = np.zeros((3, 3))
    for i, j in gt:
        probs[i, j] = 1.0
    loss, _ = graph_loss(probs, gt, 3)
    assert 0.0 <= loss < 1e-9


def test_two_brick_example():
    # top-2 over two edges at p=0.5: 2 ln2 + (ln2 + 2 ln2) / 2
    loss, _ = graph_loss(np.array([[0, 0.5], [0.5, 0]]), [(0, 1)], 1)
    assert loss == pytest.approx(3.5 * math.log(2), abs=1e-12)


def test_loss_nonnegative_and_logit_form_agrees():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        src, dst = edge_pairs(n)
        logits = rng.normal(size=src.size) * 3
        gt = [(i, j) for i, j in zip(src, dst) if i < j and rng.random() < 0.3]
        a, _ = graph_loss_logits(logits, src, dst, n, gt, n)
        probs = np.zeros((n, n))
        probs[src, dst] = sigmoid(logits)
        b, _ = graph_loss(probs, gt, n)
        assert a >= 0 and a == pytest.approx(b, rel=1e-9)


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(1)
    n = 5
    probs = rng.uniform(0.05, 0.95, (n, n))
    np.fill_diagonal(probs, 0.0)
    gt = [(0, 1), (1, 2), (0, 3), (3, 4)]
    _, grad = graph_loss(probs, gt, n)
    for i, j in zip(*edge_pairs(n)):
        up, dn = probs.copy(), probs.copy()
        up[i, j] += 1e-6
        dn[i, j] -= 1e-6
        fd = (graph_loss(up, gt, n)[0] - graph_loss(dn, gt, n)[0]) / 2e-6
        assert abs(grad[i, j] - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_backward_finite_differences():
    params = small_params(f=8, hidden=5, seed=4, scale=2.0)
    feats = rand_features(3, 8, seed=4)
    gt = [(0, 1), (1, 2)]

    def loss_of(p):
        logits, cache = edge_logits(p, feats)
        return graph_loss_logits(logits, cache["src"], cache["dst"], 3, gt, 3)[0]

    _, grads = scene_loss_and_grads(params, feats, gt)
    for name, value in params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[name][idx] += 1e-6
            dn[name][idx] -= 1e-6
            fd[idx] = (loss_of(up) - loss_of(dn)) / 2e-6
        err = np.linalg.norm(grads[name] - fd)
        assert err <= 1e-4 * max(np.linalg.norm(fd), 1e-8), name


def test_backward_single_node_is_zero():
    params = small_params()
    logits, cache = edge_logits(params, rand_features(1))
    grads = backward(params, cache, logits)
    assert all(not g.any() for g in grads.values())


# ---------------------------------------------------------------- training

def _dataset(k, seed=0):
    cfg = GenConfig(seed=seed)
    out = []
    for i in range(k):
        s = generate_scene(cfg, i)
        out.append((scene_features(LIB, s), list(s.support_edges)))
    return out


def test_zero_epochs_keeps_init():
    data = _dataset(2)
    cfg = TrainConfig(epochs=0, hidden=16)
    res = train(data, cfg)
    init = init_params(data[0][0].shape[1], 16, 2, 0, edge_prior(data))
    assert all(np.array_equal(res.params[k], init[k]) for k in init)
    assert res.steps == 0 and res.epoch_losses == []


def test_prior_initialization():
    data = _dataset(3)
    prior = edge_prior(data)
    assert 0 < prior < 0.5
    p = init_params(data[0][0].shape[1], 16, 2, 0, prior)
    assert sigmoid(p["score.b2"][0]) == pytest.approx(prior)


def test_overfit_single_scene():
    [(f, e)] = _dataset(1, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=1)
    start, _ = scene_loss_and_grads(init_params(f.shape[1], cfg.hidden, cfg.layers, cfg.seed,
                                                edge_prior([(f, e)])), f, e)
    res = train([(f, e)] * 200, cfg)
    end, _ = scene_loss_and_grads(res.params, f, e)
    assert res.steps == 200 and end < 0.1 * start


def test_training_deterministic():
    data = _dataset(6)
    cfg = TrainConfig(epochs=2, hidden=16, batch_size=4)
    a, b = train(data, cfg), train(data, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.epoch_losses == b.epoch_losses


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts():
    data = _dataset(1)
    f, e = data[0]
    bad = f.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train([(bad, e)], TrainConfig(epochs=1, hidden=8))


def test_params_roundtrip(tmp_path):
    params = small_params()
    back = params_from_dict(params_to_dict(params, {"note": 1}))
    assert all(np.array_equal(back[k], params[k]) for k in params)
    path = tmp_path / "p.json"
    save_params(params, path)
    again = load_params(path)
    assert all(np.array_equal(again[k], params[k]) for k in params)
