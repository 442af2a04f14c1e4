"""Two-layer GCN and a small dense network, both trained with hand-written gradients."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import kernels
from .graph import InductiveSplit, SparseGraph, n_pairs
from .smoothing import SparseNoiseConfig, flip_keys, mix_seed, stream_rng

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class GcnParams:
    w1: np.ndarray  # d x h
    w2: np.ndarray  # h x C

    @property
    def shapes(self):
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def copy(self) -> "GcnParams":
        return GcnParams(self.w1.copy(), self.w2.copy())

    def arrays(self) -> dict:
        return {"w1": self.w1, "w2": self.w2}


@dataclass
class MlpParams:
    w1: np.ndarray  # h x d
    w2: np.ndarray  # C x h

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.w2.copy())

    def arrays(self) -> dict:
        return {"w1": self.w1, "w2": self.w2}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    noise: SparseNoiseConfig | None = None
    seed: int = 0
    hidden: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class Prediction:
    """Per-row softmax outputs; argmax ties go to the smaller class index."""

    probabilities: np.ndarray

    @property
    def class_index(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=-1)

    @property
    def confidence(self) -> np.ndarray:
        return np.max(self.probabilities, axis=-1)

    def __getitem__(self, idx) -> "Prediction":
        return Prediction(self.probabilities[idx])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# ---------------------------------------------------------------------------
# GCN

def init_gcn(d: int, h: int, c: int, seed: int) -> GcnParams:
    rng = np.random.default_rng(seed)
    return GcnParams(glorot(rng, d, h, (d, h)), glorot(rng, h, c, (h, c)))


def _check_gcn_shapes(g: SparseGraph, params: GcnParams):
    if params.w1.shape[0] != g.num_features:
        raise ValueError(f"w1 has {params.w1.shape[0]} rows, graph has {g.num_features} features")
    if params.w1.shape[1] != params.w2.shape[0]:
        raise ValueError("w1 / w2 hidden sizes differ")


def gcn_logits(g: SparseGraph, params: GcnParams, xw1: np.ndarray | None = None) -> np.ndarray:
    """Â ReLU(Â X W1) W2.  ``xw1`` may carry a precomputed X @ W1."""
    _check_gcn_shapes(g, params)
    if xw1 is None:
        xw1 = np.asarray(g.features @ params.w1)
    e = g.edges
    h1 = np.maximum(kernels.propagate(g.n, e[:, 0], e[:, 1], xw1), 0.0)
    return kernels.propagate(g.n, e[:, 0], e[:, 1], h1 @ params.w2)


def gcn_forward(g: SparseGraph, params: GcnParams, xw1: np.ndarray | None = None) -> Prediction:
    return Prediction(softmax(gcn_logits(g, params, xw1)))


def gcn_loss_and_grad(g: SparseGraph, params: GcnParams, nodes: np.ndarray, labels: np.ndarray,
                      weight_decay: float = 0.0):
    """Mean cross-entropy over ``nodes`` plus ``weight_decay / 2 * sum(w**2)``."""
    _check_gcn_shapes(g, params)
    a = kernels.normalized_adjacency(g.n, g.edges[:, 0], g.edges[:, 1])
    x = g.features
    p = a @ np.asarray(x @ params.w1)
    h1 = np.maximum(p, 0.0)
    ah1 = a @ h1
    logits = ah1 @ params.w2
    prob = softmax(logits[nodes])
    m = nodes.shape[0]
    y = labels[nodes]
    loss = -np.mean(np.log(prob[np.arange(m), y] + 1e-300))
    loss += 0.5 * weight_decay * (np.sum(params.w1 ** 2) + np.sum(params.w2 ** 2))

    dz = np.zeros_like(logits)
    dz[nodes] = prob
    dz[nodes, y] -= 1.0
    dz /= m
    gw2 = ah1.T @ dz + weight_decay * params.w2
    dh1 = a @ (dz @ params.w2.T)
    dp = dh1 * (p > 0)
    gw1 = np.asarray(x.T @ (a @ dp)) + weight_decay * params.w1
    return loss, GcnParams(gw1, gw2)


class Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for w, gr, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * gr
            v *= self.b2
            v += (1.0 - self.b2) * gr * gr
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _local(ids_global: np.ndarray, nodes_of_subgraph: np.ndarray) -> np.ndarray:
    return np.searchsorted(nodes_of_subgraph, ids_global)


def _noisy(g: SparseGraph, noise: SparseNoiseConfig, index: int,
           transform: Callable | None) -> SparseGraph:
    rng = stream_rng(noise.seed, index)
    out = g.with_keys(flip_keys(g.keys, n_pairs(g.n), noise.p_plus, noise.p_minus, rng))
    return transform(out) if transform is not None else out


def train_classifier(g: SparseGraph, split: InductiveSplit, cfg: TrainConfig,
                     transform: Callable[[SparseGraph], SparseGraph] | None = None,
                     init: GcnParams | None = None,
                     sampler: Callable[[SparseGraph, int], SparseGraph] | None = None) -> GcnParams:
    """Full-batch Adam on the training graph with early stopping on validation accuracy.

    ``g`` is the full graph; the training graph is induced by the training
    nodes and validation runs on the training graph plus validation nodes.
    With ``cfg.noise`` set, every epoch trains on a fresh noise draw (passed
    through ``transform`` when given, e.g. a rewiring step), and validation
    uses a fixed noisy draw of the validation graph.  A custom
    ``sampler(graph, index)`` replaces the noise draw (and must apply any
    transform itself).
    """
    if g.labels is None:
        raise ValueError("training needs labels")
    if split.labeled_train.size == 0:
        raise ValueError("no labeled training nodes")
    train_nodes = split.train_nodes
    val_nodes_all = split.val_graph_nodes
    g_train = g.subgraph(train_nodes)
    g_val = g.subgraph(val_nodes_all)
    lt = _local(split.labeled_train, train_nodes)
    vl = _local(split.validation, val_nodes_all)
    y_train = g_train.labels
    y_val = g_val.labels[vl]

    c = int(g.labels.max()) + 1
    params = init.copy() if init is not None else init_gcn(g.num_features, cfg.hidden, c, cfg.seed)
    if cfg.max_epochs == 0:
        return params

    if sampler is None and cfg.noise is not None:
        noise = replace(cfg.noise, seed=mix_seed(cfg.noise.seed, cfg.seed))

        def sampler(graph, index):
            return _noisy(graph, noise, index, transform)

    if sampler is not None:
        # training draws and the validation draw use disjoint stream indices
        g_val_eval = sampler(g_val, 2**40)
    else:
        g_val_eval = transform(g_val) if transform is not None else g_val
        g_train_eval = transform(g_train) if transform is not None else g_train

    opt = Adam([params.w1.shape, params.w2.shape], cfg.learning_rate)
    best, best_acc, since = params.copy(), -1.0, 0
    for epoch in range(cfg.max_epochs):
        gt = sampler(g_train, epoch) if sampler is not None else g_train_eval
        loss, grad = gcn_loss_and_grad(gt, params, lt, y_train, cfg.weight_decay)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        opt.step([params.w1, params.w2], [grad.w1, grad.w2])
        acc = float(np.mean(gcn_forward(g_val_eval, params).class_index[vl] == y_val))
        if acc > best_acc:
            best, best_acc, since = params.copy(), acc, 0
        else:
            since += 1
            if since >= cfg.patience:
                log.info("early stop at epoch %d (best val acc %.4f)", epoch, best_acc)
                break
    return best


# ---------------------------------------------------------------------------
# dense two-layer network for vector inputs

def init_mlp(d: int, h: int, c: int, seed: int) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(glorot(rng, d, h, (h, d)), glorot(rng, h, c, (c, h)))


def mlp_forward(x: np.ndarray, params: MlpParams) -> Prediction:
    """softmax(W2 ReLU(W1 x)) for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.w1.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != {params.w1.shape[1]}")
    if params.w2.shape[1] != params.w1.shape[0]:
        raise ValueError("w1 / w2 hidden sizes differ")
    h = np.maximum(x @ params.w1.T, 0.0)
    return Prediction(softmax(h @ params.w2.T))


def mlp_loss_and_grad(params: MlpParams, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    pre = x @ params.w1.T
    h = np.maximum(pre, 0.0)
    prob = softmax(h @ params.w2.T)
    m = x.shape[0]
    loss = -np.mean(np.log(prob[np.arange(m), y] + 1e-300))
    loss += 0.5 * weight_decay * (np.sum(params.w1 ** 2) + np.sum(params.w2 ** 2))
    dz = prob
    dz[np.arange(m), y] -= 1.0
    dz /= m
    gw2 = dz.T @ h + weight_decay * params.w2
    dpre = (dz @ params.w2) * (pre > 0)
    gw1 = dpre.T @ x + weight_decay * params.w1
    return loss, MlpParams(gw1, gw2)


def train_mlp(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, noise_sigma: float = 0.0,
              x_val: np.ndarray | None = None, y_val: np.ndarray | None = None) -> MlpParams:
    """Full-batch Adam; with ``noise_sigma`` > 0 each epoch sees fresh Gaussian noise."""
    rng = np.random.default_rng(cfg.seed)
    c = int(y.max()) + 1
    params = init_mlp(x.shape[1], cfg.hidden, c, cfg.seed)
    if cfg.max_epochs == 0:
        return params
    opt = Adam([params.w1.shape, params.w2.shape], cfg.learning_rate)
    best, best_acc, since = params.copy(), -1.0, 0
    for epoch in range(cfg.max_epochs):
        xb = x + noise_sigma * rng.standard_normal(x.shape) if noise_sigma > 0 else x
        loss, grad = mlp_loss_and_grad(params, xb, y, cfg.weight_decay)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        opt.step([params.w1, params.w2], [grad.w1, grad.w2])
        if x_val is not None:
            acc = float(np.mean(mlp_forward(x_val, params).class_index == y_val))
            if acc > best_acc:
                best, best_acc, since = params.copy(), acc, 0
            else:
                since += 1
                if since >= cfg.patience:
                    break
    return best if x_val is not None else params


# ---------------------------------------------------------------------------
# checkpoints

def save_params(path, params, meta: dict | None = None) -> None:
    """Versioned ``.npz`` checkpoint; ``meta`` is stored as a JSON string."""
    kind = type(params).__name__
    arrays = params.arrays()
    np.savez(path, format_version=np.int64(CHECKPOINT_VERSION), kind=np.str_(kind),
             meta=np.str_(json.dumps(meta or {}, sort_keys=True)),
             shapes=np.str_(json.dumps({k: list(v.shape) for k, v in arrays.items()})),
             **arrays)


_KINDS = {"GcnParams": GcnParams, "MlpParams": MlpParams}


def load_params(path):
    """Returns ``(params, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} unsupported")
        kind = str(z["kind"])
        if kind not in _KINDS:
            raise ValueError(f"unknown checkpoint kind {kind!r}")
        shapes = json.loads(str(z["shapes"]))
        arrays = {k: z[k].astype(np.float64) for k in shapes}
        for k, s in shapes.items():
            if list(arrays[k].shape) != s:
                raise ValueError(f"checkpoint array {k} has shape {arrays[k].shape}, header says {s}")
        meta = json.loads(str(z["meta"]))
    return _KINDS[kind](**arrays), meta


def export_json(path, params) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"kind": type(params).__name__,
                   **{k: v.tolist() for k, v in params.arrays().items()}}, fh)
