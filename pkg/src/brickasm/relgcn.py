"""Edge-MLP message passing network for brick relation graphs, in numpy.

Forward and backward passes are written out by hand. Parameters live in a
flat ``dict[str, np.ndarray]`` so the optimizer and serializer can treat
every tensor the same way.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NonFiniteLoss
from .model import Library

log = logging.getLogger(__name__)

PARAMS_VERSION = 1
EPS = 1e-12
POSITION_SCALE = 1.0  # world units; /3 trains too slowly under the fixed recipe


# ---------------------------------------------------------------- features

def node_features(library: Library, bricks) -> np.ndarray:
    """One-hot shape, one-hot texture, position * POSITION_SCALE and (sin yaw, cos yaw).

    ``bricks`` yields ``(shape_id, texture_id, position, yaw)`` tuples.
    """
    ns, nt = len(library.shapes), len(library.textures)
    rows = []
    for shape_id, texture_id, position, yaw in bricks:
        f = np.zeros(ns + nt + 5)
        f[library.shape_position(shape_id)] = 1.0
        f[ns + library.texture_position(texture_id)] = 1.0
        f[ns + nt:ns + nt + 3] = np.asarray(position, dtype=float) * POSITION_SCALE
        f[ns + nt + 3] = math.sin(yaw)
        f[ns + nt + 4] = math.cos(yaw)
        rows.append(f)
    return np.array(rows).reshape(len(rows), ns + nt + 5)


def scene_features(library: Library, scene) -> np.ndarray:
    return node_features(library, [(b.shape_id, b.texture_id, b.pose.position, b.pose.yaw) for b in scene.bricks])


# ---------------------------------------------------------------- params

def init_params(feature_width: int, hidden: int = 256, layers: int = 2, seed: int = 0,
                edge_prior: float | None = None) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.

    With ``edge_prior`` the output bias starts at its log-odds, so the
    untrained network already predicts the base edge rate.
    """
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    f = feature_width
    params = {}
    for t in range(layers):
        params[f"edge{t}.w1"], params[f"edge{t}.b1"] = dense(2 * f, hidden)
        params[f"edge{t}.w2"], params[f"edge{t}.b2"] = dense(hidden, f)
    params["score.w1"], params["score.b1"] = dense(f, hidden)
    params["score.w2"], params["score.b2"] = dense(hidden, 1)
    if edge_prior is not None:
        q = min(max(edge_prior, 1e-6), 1.0 - 1e-6)
        params["score.b2"][:] = math.log(q / (1.0 - q))
    return params


def edge_prior(dataset) -> float:
    """Fraction of ordered brick pairs that are support edges."""
    pos = sum(len(edges) for _, edges in dataset)
    total = sum(f.shape[0] * (f.shape[0] - 1) for f, _ in dataset)
    return pos / total if total else 0.5


def num_layers(params) -> int:
    return sum(1 for k in params if k.endswith(".w1") and k.startswith("edge"))


def params_to_dict(params, meta=None) -> dict:
    return {
        "format": "gcn_params",
        "version": PARAMS_VERSION,
        "layers": num_layers(params),
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()},
        "meta": meta or {},
    }


def params_from_dict(d) -> dict:
    if d.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported gcn_params version {d.get('version')}")
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["tensors"].items()}


def save_params(params, path, meta=None):
    with open(path, "w") as fh:
        json.dump(params_to_dict(params, meta), fh)


def load_params(path) -> dict:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


# ---------------------------------------------------------------- forward / backward

def edge_pairs(n: int):
    """All ordered pairs i != j in lexicographic order."""
    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    return src, dst


def _relu(x):
    return np.maximum(x, 0.0)


def message_pass(params, features):
    """Run the edge-MLP message-passing layers.

    Returns ``(edges, cache)`` where ``edges`` is the final edge feature
    matrix (one row per ordered pair from :func:`edge_pairs`) and ``cache``
    holds the per-layer node features and activations.
    """
    p = np.asarray(features, dtype=float)
    n = p.shape[0]
    src, dst = edge_pairs(n)
    cache = {"n": n, "src": src, "dst": dst, "layers": []}
    e = np.zeros((0, p.shape[1]))
    for t in range(num_layers(params)):
        if n < 2:
            break
        inp = np.concatenate([p[src], p[dst]], axis=1)
        a = inp @ params[f"edge{t}.w1"] + params[f"edge{t}.b1"]
        h = _relu(a)
        e = h @ params[f"edge{t}.w2"] + params[f"edge{t}.b2"]
        cache["layers"].append({"p": p, "inp": inp, "a": a, "h": h})
        p_next = np.zeros((n, e.shape[1]))
        np.add.at(p_next, dst, e)
        p = p_next / (n - 1)
    cache["p_final"] = p
    return e, cache


def edge_logits(params, features):
    e, cache = message_pass(params, features)
    a = e @ params["score.w1"] + params["score.b1"]
    h = _relu(a)
    logits = (h @ params["score.w2"] + params["score.b2"]).ravel()
    cache.update(score_in=e, score_a=a, score_h=h)
    return logits, cache


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def to_matrix(n, values, src, dst, fill=0.0):
    m = np.full((n, n), fill, dtype=float)
    m[src, dst] = values
    return m


def edge_probabilities(params, features) -> np.ndarray:
    """n x n matrix of predicted edge probabilities; the diagonal is 0."""
    logits, cache = edge_logits(params, features)
    return to_matrix(cache["n"], sigmoid(logits), cache["src"], cache["dst"])


def backward(params, cache, dlogits) -> dict:
    """Gradients of every parameter given d(loss)/d(logits)."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    n, src, dst = cache["n"], cache["src"], cache["dst"]
    if n < 2:
        return grads
    dl = np.asarray(dlogits, dtype=float).reshape(-1, 1)
    h = cache["score_h"]
    grads["score.w2"] = h.T @ dl
    grads["score.b2"] = dl.sum(axis=0)
    da = (dl @ params["score.w2"].T) * (cache["score_a"] > 0)
    grads["score.w1"] = cache["score_in"].T @ da
    grads["score.b1"] = da.sum(axis=0)
    de = da @ params["score.w1"].T

    layers = cache["layers"]
    for t in reversed(range(len(layers))):
        lc = layers[t]
        grads[f"edge{t}.w2"] = lc["h"].T @ de
        grads[f"edge{t}.b2"] = de.sum(axis=0)
        dh = de @ params[f"edge{t}.w2"].T
        da = dh * (lc["a"] > 0)
        grads[f"edge{t}.w1"] = lc["inp"].T @ da
        grads[f"edge{t}.b1"] = da.sum(axis=0)
        if t == 0:
            break
        dinp = da @ params[f"edge{t}.w1"].T
        f = lc["p"].shape[1]
        dp = np.zeros_like(lc["p"])
        np.add.at(dp, src, dinp[:, :f])
        np.add.at(dp, dst, dinp[:, f:])
        # p_t[i] is the mean of the previous layer's edges into i
        de = dp[dst] / (n - 1)
    return grads


# ---------------------------------------------------------------- loss

def topk_weights(probs_flat, src, dst, k_e: int) -> np.ndarray:
    """Extra loss weight per edge from averaging the top-k losses for k = 1..k_e.

    The edge ranked r (1-based, by descending probability, ties broken by
    (i, j)) appears in k_e - r + 1 of the k_e top-k sets.
    """
    order = np.lexsort((dst, src, -np.asarray(probs_flat)))
    w = np.zeros(len(order))
    for r, idx in enumerate(order[:k_e], start=1):
        w[idx] = (k_e - r + 1) / k_e
    return w


def _labels(n, src, dst, gt_edges):
    gt = set(map(tuple, gt_edges))
    return np.array([1.0 if (i, j) in gt else 0.0 for i, j in zip(src, dst)])


def graph_loss(probs, gt_edges, count_gt: int, pos_weight: float = 1.0):
    """Full-edge cross-entropy plus the averaged top-k cross-entropy.

    ``probs`` is the n x n probability matrix (diagonal ignored). Returns
    ``(loss, grad)`` with ``grad`` the n x n derivative wrt ``probs``.
    """
    probs = np.asarray(probs, dtype=float)
    n = probs.shape[0]
    src, dst = edge_pairs(n)
    p = probs[src, dst]
    y = _labels(n, src, dst, gt_edges)
    w = 1.0 + topk_weights(p, src, dst, count_gt + 1)
    cw = np.where(y > 0, pos_weight, 1.0) * w
    pc = np.clip(p, EPS, 1.0 - EPS)
    ce = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    dce = np.where((p > EPS) & (p < 1.0 - EPS), -y / pc + (1.0 - y) / (1.0 - pc), 0.0)
    return float((cw * ce).sum()), to_matrix(n, cw * dce, src, dst)


def _softplus(x):
    return np.logaddexp(0.0, x)


def graph_loss_logits(logits, src, dst, n, gt_edges, count_gt: int, pos_weight: float = 1.0):
    """:func:`graph_loss` evaluated from logits, with d(loss)/d(logits)."""
    p = sigmoid(logits)
    y = _labels(n, src, dst, gt_edges)
    w = 1.0 + topk_weights(p, src, dst, count_gt + 1)
    cw = np.where(y > 0, pos_weight, 1.0) * w
    cap = -math.log(EPS)
    nll_pos = _softplus(-logits)
    nll_neg = _softplus(logits)
    ce = y * np.minimum(nll_pos, cap) + (1.0 - y) * np.minimum(nll_neg, cap)
    d = y * np.where(nll_pos < cap, p - 1.0, 0.0) + (1.0 - y) * np.where(nll_neg < cap, p, 0.0)
    return float((cw * ce).sum()), cw * d


def scene_loss_and_grads(params, features, gt_edges, pos_weight: float = 1.0):
    logits, cache = edge_logits(params, features)
    n = cache["n"]
    if n < 2:
        return 0.0, {k: np.zeros_like(v) for k, v in params.items()}
    loss, dlogits = graph_loss_logits(logits, cache["src"], cache["dst"], n, gt_edges, n, pos_weight)
    return loss, backward(params, cache, dlogits)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.8  # multiplied in after every epoch
    weight_decay: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    hidden: int = 256
    layers: int = 2
    pos_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    epoch_losses: list
    steps: int


def train(dataset, config: TrainConfig = TrainConfig(), params: dict | None = None,
          max_steps: int | None = None) -> TrainResult:
    """AdamW with decoupled weight decay and per-epoch exponential lr decay.

    ``dataset`` is a list of ``(features, gt_edges)`` pairs. Batches are
    drawn from a seeded shuffle each epoch; the batch gradient is the mean
    of the per-scene gradients.
    """
    if not dataset:
        raise ValueError("empty training set")
    width = dataset[0][0].shape[1]
    if params is None:
        params = init_params(width, config.hidden, config.layers, config.seed, edge_prior(dataset))
    params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    step = 0
    epoch_losses = []
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** epoch
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            gsum = {k: np.zeros_like(v) for k, v in params.items()}
            bloss = 0.0
            for idx in batch:
                feats, edges = dataset[idx]
                loss, grads = scene_loss_and_grads(params, feats, edges, config.pos_weight)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"epoch {epoch} step {step} scene {idx}: loss={loss}")
                bloss += loss
                for k in gsum:
                    gsum[k] += grads[k]
            total += bloss
            step += 1
            b1t = 1.0 - config.beta1 ** step
            b2t = 1.0 - config.beta2 ** step
            for k in params:
                g = gsum[k] / len(batch)
                params[k] *= 1.0 - lr * config.weight_decay
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
                v2[k] = config.beta2 * v2[k] + (1.0 - config.beta2) * g * g
                params[k] -= lr * (m[k] / b1t) / (np.sqrt(v2[k] / b2t) + config.adam_eps)
            if max_steps is not None and step >= max_steps:
                break
        epoch_losses.append(total / len(dataset))
        log.info("epoch %d lr %.3g mean loss %.5f", epoch, lr, epoch_losses[-1])
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(params, epoch_losses, step)
