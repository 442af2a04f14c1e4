"""Edge-score augmenters, their training, threshold selection and graph rewiring.

Scores depend on node features only, so one :class:`EdgeScoreMatrix` is built
per graph and reused for every noisy sample.  Up to ``dense_limit`` nodes all
unordered pairs are scored; above it each node keeps its ``candidate_k`` best
partners and additions are restricted to those candidates.
"""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import kernels
from .classifiers import Adam, TrainConfig, glorot
from .graph import SparseGraph, decode_keys, n_pairs, pair_keys
from .smoothing import SparseNoiseConfig, _sample_distinct, rank_to_nonedge_key

log = logging.getLogger(__name__)

KINDS = ("jaccard", "fae", "sim")
POPULATIONS = ("sample", "pairs")
DEFAULT_DENSE_LIMIT = 4000
DEFAULT_CANDIDATE_K = 200
_BLOCK_ROWS = 256


# ---------------------------------------------------------------------------
# pair scorers: rows-vs-all blocks and arbitrary pair lists

class _Jaccard:
    def __init__(self, x: sp.csr_matrix):
        self.x = x
        self.xt = x.T.tocsr()
        self.size = np.asarray(x.sum(axis=1)).ravel()

    def block(self, rows):
        inter = (self.x[rows] @ self.xt).toarray()
        union = self.size[rows, None] + self.size[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(union > 0, inter / union, 0.0)
        return out

    def pairs(self, u, v):
        inter = np.asarray(self.x[u].multiply(self.x[v]).sum(axis=1)).ravel()
        union = self.size[u] + self.size[v] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / union, 0.0)


class _Fae:
    def __init__(self, z: np.ndarray):
        self.z = z

    def block(self, rows):
        return expit(self.z[rows] @ self.z.T)

    def pairs(self, u, v):
        return expit(np.einsum("ij,ij->i", self.z[u], self.z[v]))


class _Sim:
    def __init__(self, x: sp.csr_matrix, weights: np.ndarray):
        self.heads = []
        for w in weights:
            xw = sp.csr_matrix(x @ sp.diags(w))
            norm = np.sqrt(np.asarray(xw.multiply(xw).sum(axis=1)).ravel())
            inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
            xn = sp.csr_matrix(sp.diags(inv) @ xw)
            self.heads.append((xn, xn.T.tocsr()))

    def block(self, rows):
        acc = 0.0
        for xn, xt in self.heads:
            acc = acc + (xn[rows] @ xt).toarray()
        return acc / len(self.heads)

    def pairs(self, u, v):
        acc = 0.0
        for xn, _ in self.heads:
            acc = acc + np.asarray(xn[u].multiply(xn[v]).sum(axis=1)).ravel()
        return acc / len(self.heads)


@dataclass(eq=False)
class EdgeScoreMatrix:
    """Symmetric pair scores.

    Dense storage keeps ``tri``, the scores of all unordered pairs in pair-key
    order.  Top-k storage keeps ``cand_keys`` / ``cand_values`` (sorted by key)
    and falls back to the scorer for pairs outside the candidate set.
    """

    n: int
    kind: str
    scorer: object = field(repr=False)
    tri: np.ndarray | None = field(default=None, repr=False)
    cand_keys: np.ndarray | None = field(default=None, repr=False)
    cand_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_dense(self) -> bool:
        return self.tri is not None

    def pair_scores(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        if self.is_dense:
            out = np.zeros(u.shape[0])
            off = u != v
            out[off] = self.tri[pair_keys(u[off], v[off], self.n)]
            return out
        return self.scorer.pairs(u, v)

    def key_scores(self, keys: np.ndarray) -> np.ndarray:
        if self.is_dense:
            return self.tri[keys]
        if keys.shape[0] == 0:
            return np.empty(0)
        u, v = decode_keys(keys, self.n)
        return self.scorer.pairs(u, v)

    def all_pair_scores(self) -> np.ndarray:
        if self.is_dense:
            return self.tri
        return np.concatenate(list(self.iter_blocks()))

    def iter_blocks(self):
        """Scores of all unordered pairs in key order, in row blocks."""
        if self.is_dense:
            step = 1 << 20
            for s in range(0, self.tri.shape[0], step):
                yield self.tri[s : s + step]
            return
        for i0 in range(0, self.n, _BLOCK_ROWS):
            rows = np.arange(i0, min(self.n, i0 + _BLOCK_ROWS))
            b = self.scorer.block(rows)
            yield np.concatenate([b[r, i + 1 :] for r, i in enumerate(rows)])

    @cached_property
    def ranked(self) -> tuple[np.ndarray, np.ndarray]:
        """Candidate keys and scores, by descending score then ascending key."""
        if self.is_dense:
            keys = np.arange(self.tri.shape[0], dtype=np.int64)
            vals = self.tri
        else:
            keys, vals = self.cand_keys, self.cand_values
        order = np.lexsort((keys, -vals))
        return np.ascontiguousarray(keys[order]), np.ascontiguousarray(vals[order])

    @property
    def num_candidates(self) -> int:
        return self.tri.shape[0] if self.is_dense else self.cand_keys.shape[0]

    def dense_matrix(self) -> np.ndarray:
        """Full symmetric n x n matrix with zero diagonal (small graphs only)."""
        m = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n, k=1)
        m[iu] = self.all_pair_scores()
        return m + m.T


def _build(n: int, kind: str, scorer, candidate_k: int, dense_limit: int) -> EdgeScoreMatrix:
    if n <= dense_limit:
        parts = []
        for i0 in range(0, n, _BLOCK_ROWS):
            rows = np.arange(i0, min(n, i0 + _BLOCK_ROWS))
            b = scorer.block(rows)
            parts.extend(b[r, i + 1 :] for r, i in enumerate(rows))
        tri = np.concatenate(parts) if parts else np.empty(0)
        return EdgeScoreMatrix(n, kind, scorer, tri=tri)
    k = min(candidate_k, n - 1)
    us, vs = [], []
    for i0 in range(0, n, _BLOCK_ROWS):
        rows = np.arange(i0, min(n, i0 + _BLOCK_ROWS))
        b = scorer.block(rows)
        b[np.arange(rows.shape[0]), rows] = -np.inf
        top = np.argpartition(-b, k - 1, axis=1)[:, :k]
        us.append(np.repeat(rows, k))
        vs.append(top.ravel())
    keys = np.unique(pair_keys(np.concatenate(us), np.concatenate(vs), n))
    u, v = decode_keys(keys, n)
    return EdgeScoreMatrix(n, kind, scorer, cand_keys=keys, cand_values=scorer.pairs(u, v))


# ---------------------------------------------------------------------------
# augmenter parameters and scores

@dataclass
class AugmenterParams:
    kind: str
    fae_w2: np.ndarray | None = None  # d x h2
    fae_w1: np.ndarray | None = None  # h2 x e
    sim_weights: np.ndarray | None = None  # m x d
    trained: bool = False

    def arrays(self) -> dict:
        if self.kind == "fae":
            return {"fae_w2": self.fae_w2, "fae_w1": self.fae_w1}
        return {"sim_weights": self.sim_weights}

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def init_augmenter(kind: str, d: int, seed: int, hidden: int = 256, embed: int = 64,
                   heads: int = 4, init_noise: float = 0.01) -> AugmenterParams:
    rng = np.random.default_rng(seed)
    if kind == "fae":
        return AugmenterParams("fae", fae_w2=glorot(rng, d, hidden, (d, hidden)),
                               fae_w1=glorot(rng, hidden, embed, (hidden, embed)))
    if kind == "sim":
        if heads < 1:
            raise ValueError("need at least one head")
        return AugmenterParams("sim", sim_weights=1.0 + init_noise * rng.standard_normal((heads, d)))
    raise ValueError(f"kind must be 'fae' or 'sim', got {kind!r}")


def _features(g: SparseGraph, binarize: bool, need_binary: bool) -> sp.csr_matrix:
    x = g.features
    if binarize:
        x = x.copy()
        x.data[:] = (x.data != 0).astype(np.float64)
        x.eliminate_zeros()
    elif need_binary and not g.has_binary_features():
        raise ValueError("Jaccard scores need binary features; pass binarize=True")
    return x


def fae_embeddings(x: sp.csr_matrix, params: AugmenterParams) -> np.ndarray:
    return np.maximum(np.asarray(x @ params.fae_w2), 0.0) @ params.fae_w1


def jaccard_scores(g: SparseGraph, candidate_k: int = DEFAULT_CANDIDATE_K,
                   dense_limit: int = DEFAULT_DENSE_LIMIT, binarize: bool = False) -> EdgeScoreMatrix:
    x = _features(g, binarize, need_binary=True)
    return _build(g.n, "jaccard", _Jaccard(x), candidate_k, dense_limit)


def _require(params: AugmenterParams, kind: str):
    if params.kind != kind:
        raise ValueError(f"expected {kind} parameters, got {params.kind}")
    if not params.trained:
        raise ValueError(f"{kind} augmenter has not been trained")


def fae_scores(g: SparseGraph, params: AugmenterParams, candidate_k: int = DEFAULT_CANDIDATE_K,
               dense_limit: int = DEFAULT_DENSE_LIMIT) -> EdgeScoreMatrix:
    _require(params, "fae")
    z = fae_embeddings(g.features, params)
    return _build(g.n, "fae", _Fae(z), candidate_k, dense_limit)


def sim_scores(g: SparseGraph, params: AugmenterParams, candidate_k: int = DEFAULT_CANDIDATE_K,
               dense_limit: int = DEFAULT_DENSE_LIMIT) -> EdgeScoreMatrix:
    _require(params, "sim")
    return _build(g.n, "sim", _Sim(g.features, params.sim_weights), candidate_k, dense_limit)


def edge_scores(g: SparseGraph, kind: str, params: AugmenterParams | None = None,
                candidate_k: int = DEFAULT_CANDIDATE_K, dense_limit: int = DEFAULT_DENSE_LIMIT,
                binarize: bool = False) -> EdgeScoreMatrix:
    if kind == "jaccard":
        return jaccard_scores(g, candidate_k, dense_limit, binarize)
    if kind == "fae":
        return fae_scores(g, params, candidate_k, dense_limit)
    if kind == "sim":
        return sim_scores(g, params, candidate_k, dense_limit)
    raise ValueError(f"unknown augmenter kind {kind!r}")


# ---------------------------------------------------------------------------
# augmenter training

_EPS = 1e-12


def fae_loss_and_grad(x: sp.csr_matrix, params: AugmenterParams, u, v, y):
    """Mean binary cross-entropy of sigmoid(z_u . z_v) against ``y``."""
    p = np.asarray(x @ params.fae_w2)
    h = np.maximum(p, 0.0)
    z = h @ params.fae_w1
    s = np.einsum("ij,ij->i", z[u], z[v])
    m = s.shape[0]
    # softplus(s) - y s, computed stably
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
    ds = (expit(s) - y) / m
    n = z.shape[0]
    b = sp.csr_matrix((ds, (u, v)), shape=(n, n))
    dz = b @ z + b.T @ z
    gw1 = h.T @ dz
    dp = (dz @ params.fae_w1.T) * (p > 0)
    gw2 = np.asarray(x.T @ dp)
    return loss, {"fae_w2": gw2, "fae_w1": gw1}


def sim_loss_and_grad(x: sp.csr_matrix, params: AugmenterParams, u, v, y):
    """Mean binary cross-entropy of (S + 1) / 2 against ``y``."""
    w = params.sim_weights
    heads = w.shape[0]
    xu, xv = x[u], x[v]
    xuv = xu.multiply(xv).tocsr()
    xu2 = xu.multiply(xu).tocsr()
    xv2 = xv.multiply(xv).tocsr()
    gsq = (w * w).T  # d x m
    num = np.asarray(xuv @ gsq)
    du = np.asarray(xu2 @ gsq)
    dv = np.asarray(xv2 @ gsq)
    ok = (du > 0) & (dv > 0)
    root = np.sqrt(np.where(ok, du * dv, 1.0))
    cos = np.where(ok, num / root, 0.0)
    s = cos.mean(axis=1)
    q = np.clip((s + 1.0) / 2.0, _EPS, 1.0 - _EPS)
    m = s.shape[0]
    loss = float(-np.mean(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)))
    dq = (q - y) / (q * (1.0 - q)) / m
    coef = 0.5 * dq[:, None] / heads * ok  # dL / dcos per pair and head
    a = coef / root
    bu = np.where(ok, 0.5 * coef * cos / np.where(ok, du, 1.0), 0.0)
    bv = np.where(ok, 0.5 * coef * cos / np.where(ok, dv, 1.0), 0.0)
    dg = np.asarray(xuv.T @ a) - np.asarray(xu2.T @ bu) - np.asarray(xv2.T @ bv)  # d x m
    return loss, {"sim_weights": 2.0 * w * dg.T}


def augmenter_loss_and_grad(x, params, u, v, y):
    if params.kind == "fae":
        return fae_loss_and_grad(x, params, u, v, y)
    return sim_loss_and_grad(x, params, u, v, y)


def sample_training_pairs(g: SparseGraph, rng: np.random.Generator, pos_fraction: float = 0.9,
                          neg_ratio: int = 10):
    """Random ``pos_fraction`` of the edges and ``neg_ratio`` times as many non-edges."""
    e = g.num_edges
    n_pos = int(round(pos_fraction * e))
    pos = np.sort(rng.choice(g.keys, size=n_pos, replace=False))
    avail = n_pairs(g.n) - e
    n_neg = min(neg_ratio * n_pos, avail)
    neg = rank_to_nonedge_key(_sample_distinct(rng, n_neg, avail), g.keys)
    keys = np.concatenate([pos, neg])
    u, v = decode_keys(keys, g.n)
    y = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return u, v, y, pos


def augmenter_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, weight_decay=0.0, max_epochs=250, patience=250, seed=seed)


@dataclass
class AugmenterFit:
    params: AugmenterParams
    losses: np.ndarray
    positives: np.ndarray  # edge keys used as positives


def train_augmenter(g_train: SparseGraph, kind: str, cfg: TrainConfig | None = None,
                    hidden: int = 256, embed: int = 64, heads: int = 4,
                    binarize: bool = False) -> AugmenterFit:
    """Full-batch Adam on the edge / non-edge cross-entropy of the clean training graph."""
    if kind == "jaccard":
        raise ValueError("the Jaccard augmenter has no parameters to train")
    cfg = cfg or augmenter_train_config()
    if g_train.num_edges < 10:
        raise ValueError(f"need at least 10 edges to train, graph has {g_train.num_edges}")
    x = _features(g_train, binarize, need_binary=False)
    rng = np.random.default_rng(cfg.seed)
    params = init_augmenter(kind, g_train.num_features, int(rng.integers(2**63)),
                            hidden, embed, heads)
    u, v, y, pos = sample_training_pairs(g_train, rng)
    names = list(params.arrays())
    opt = Adam([getattr(params, k).shape for k in names], cfg.learning_rate)
    losses = []
    for epoch in range(cfg.max_epochs):
        loss, grad = augmenter_loss_and_grad(x, params, u, v, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite augmenter loss at epoch {epoch}")
        losses.append(loss)
        ws = [getattr(params, k) for k in names]
        gs = [grad[k] + cfg.weight_decay * w for k, w in zip(names, ws)]
        opt.step(ws, gs)
    losses.append(augmenter_loss_and_grad(x, params, u, v, y)[0])
    params.trained = True
    return AugmenterFit(params, np.asarray(losses), pos)


def save_augmenter(path, params: AugmenterParams) -> None:
    np.savez(path, format_version=np.int64(1), kind=np.str_(params.kind),
             trained=np.bool_(params.trained), **params.arrays())


def load_augmenter(path) -> AugmenterParams:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != 1:
            raise ValueError("unsupported augmenter checkpoint version")
        kind = str(z["kind"])
        arrays = {k: z[k] for k in z.files if k.startswith(kind + "_")}
        return AugmenterParams(kind, trained=bool(z["trained"]), **arrays)


# ---------------------------------------------------------------------------
# thresholds

@dataclass(frozen=True)
class ThresholdPair:
    """Prune threshold ``tau`` and add threshold ``xi``.

    ``add_count`` / ``del_count`` are in adjacency-entry units (each undirected
    pair counts twice).  With ``population == "sample"`` the thresholds are
    resolved per noisy graph from its own edges and non-edges and the stored
    ``tau`` / ``xi`` are NaN.
    """

    tau: float
    xi: float
    add_count: int
    del_count: int
    population: str = "pairs"

    @property
    def add_pairs(self) -> int:
        return (self.add_count + 1) // 2

    @property
    def del_pairs(self) -> int:
        return (self.del_count + 1) // 2


IDENTITY = ThresholdPair(-np.inf, np.inf, 0, 0, "pairs")


def kth_score(scores: EdgeScoreMatrix, k: int, largest: bool, bins: int = 4096) -> float:
    """k-th largest (or smallest) score over all unordered pairs, 1-based.

    Dense storage uses a partition of the stored vector; otherwise the pair
    blocks are streamed with histogram refinement, so the n^2 scores are never
    held at once.
    """
    total = n_pairs(scores.n)
    if not 1 <= k <= total:
        raise ValueError(f"k={k} outside [1, {total}]")
    if scores.is_dense:
        t = scores.tri
        return float(np.partition(t, t.shape[0] - k)[t.shape[0] - k] if largest
                     else np.partition(t, k - 1)[k - 1])
    sign = -1.0 if largest else 1.0
    lo, hi = np.inf, -np.inf
    for b in scores.iter_blocks():
        lo = min(lo, float((sign * b).min()))
        hi = max(hi, float((sign * b).max()))
    rank = k  # rank within [lo, hi]
    while True:
        inside, below = [], 0
        edges = np.linspace(lo, hi, bins + 1)
        counts = np.zeros(bins, dtype=np.int64)
        for b in scores.iter_blocks():
            s = sign * b
            s = s[(s >= lo) & (s <= hi)]
            counts += np.histogram(s, bins=edges)[0]
        csum = np.cumsum(counts)
        j = int(np.searchsorted(csum, rank))
        below = int(csum[j - 1]) if j > 0 else 0
        new_lo, new_hi = edges[j], edges[j + 1]
        if counts[j] <= 1 << 20 or new_lo == lo and new_hi == hi:
            for b in scores.iter_blocks():
                s = sign * b
                inside.append(s[(s >= new_lo) & ((s < new_hi) if j < bins - 1 else (s <= new_hi))])
            vals = np.sort(np.concatenate(inside))
            return float(sign * vals[rank - below - 1])
        lo, hi, rank = new_lo, new_hi, rank - below


def _resolve_counts(add_count: int, del_count: int, scores: EdgeScoreMatrix,
                    population: str) -> ThresholdPair:
    if population not in POPULATIONS:
        raise ValueError(f"population must be one of {POPULATIONS}")
    if population == "sample":
        return ThresholdPair(np.nan, np.nan, add_count, del_count, "sample")
    total = scores.num_candidates
    ka, kd = (add_count + 1) // 2, (del_count + 1) // 2
    if ka > total:
        warnings.warn(f"ADD={add_count} exceeds the {total} candidate pairs; adding all")
        xi = -np.inf
    elif ka == 0:
        xi = np.inf
    elif scores.is_dense:
        xi = kth_score(scores, ka, largest=True)
    else:
        # additions only ever come from candidates
        xi = float(scores.ranked[1][ka - 1])
    total_pairs = n_pairs(scores.n)
    if kd > total_pairs:
        warnings.warn(f"DEL={del_count} exceeds the {total_pairs} pairs; pruning all")
        tau = np.inf
    elif kd == 0:
        tau = -np.inf
    else:
        tau = kth_score(scores, kd, largest=False)
    return ThresholdPair(tau, xi, add_count, del_count, "pairs")


def noise_adaptive_thresholds(scores: EdgeScoreMatrix, e_ratio: float, n_test: int,
                              cfg: SparseNoiseConfig, population: str = "sample") -> ThresholdPair:
    """Match the rewiring volume to the expected noise volume.

    E' = e_ratio * n_test^2, ADD = floor(E' p_minus), DEL = floor((n_test^2 - E') p_plus).
    """
    e_prime = e_ratio * n_test * n_test
    add = int(math.floor(e_prime * cfg.p_minus))
    dele = int(math.floor((n_test * n_test - e_prime) * cfg.p_plus))
    return _resolve_counts(add, dele, scores, population)


def gnncert_threshold(scores: EdgeScoreMatrix, e_ratio: float, n_test: int, t_s: int,
                      population: str = "sample") -> ThresholdPair:
    """No pruning; ADD = floor(E' (1 - 1/T_s)) to refill a 1/T_s edge share."""
    if t_s < 1:
        raise ValueError("t_s must be >= 1")
    e_prime = e_ratio * n_test * n_test
    add = int(math.floor(e_prime * (1.0 - 1.0 / t_s)))
    th = _resolve_counts(add, 0, scores, population)
    return ThresholdPair(-np.inf, th.xi, th.add_count, 0, th.population)


def sample_thresholds(g_noisy: SparseGraph, scores: EdgeScoreMatrix,
                      th: ThresholdPair) -> tuple[float, float]:
    """Concrete ``(tau, xi)`` for one noisy graph."""
    if th.population == "pairs":
        return th.tau, th.xi
    kd, ka = th.del_pairs, th.add_pairs
    if kd == 0:
        tau = -np.inf
    elif kd >= g_noisy.num_edges:
        tau = np.inf
    else:
        tau = float(np.partition(scores.key_scores(g_noisy.keys), kd - 1)[kd - 1])
    xi = kernels.top_absent(*scores.ranked, g_noisy.keys, ka)[1] if ka else np.inf
    return tau, xi


# ---------------------------------------------------------------------------
# rewiring

def rewire(g_noisy: SparseGraph, scores: EdgeScoreMatrix, thresholds: ThresholdPair) -> SparseGraph:
    """Keep edges scoring above tau; add candidate non-edges scoring above xi."""
    if scores.n != g_noisy.n:
        raise ValueError(f"score matrix has n={scores.n}, graph has n={g_noisy.n}")
    keys = g_noisy.keys
    cand_keys, cand_vals = scores.ranked
    if thresholds.population == "sample":
        kd, ka = thresholds.del_pairs, thresholds.add_pairs
        if kd == 0:
            kept = keys
        elif kd >= keys.shape[0]:
            kept = keys[:0]
        else:
            s = scores.key_scores(keys)
            tau = np.partition(s, kd - 1)[kd - 1]
            kept = keys[s > tau]
        added = kernels.top_absent(cand_keys, cand_vals, keys, ka)[0]
    else:
        tau, xi = thresholds.tau, thresholds.xi
        if tau == -np.inf:
            kept = keys
        elif tau == np.inf:
            kept = keys[:0]
        else:
            kept = keys[scores.key_scores(keys) > tau]
        if xi == np.inf:
            added = keys[:0]
        else:
            # candidates are sorted by descending score; take the strict prefix
            cut = int(np.searchsorted(-cand_vals, -xi, side="left"))
            head = cand_keys[:cut]
            if keys.shape[0] and head.shape[0]:
                idx = np.searchsorted(keys, head)
                idx[idx == keys.shape[0]] = 0
                head = head[keys[idx] != head]
            added = np.sort(head)
    if added.shape[0] == 0:
        return g_noisy.with_keys(kept.copy() if kept is keys else kept)
    out = np.concatenate([kept, added])
    out.sort()
    return g_noisy.with_keys(out)


# ---------------------------------------------------------------------------
# score cache

def graph_digest(g: SparseGraph) -> str:
    h = hashlib.sha256()
    x = g.features
    for arr in (np.int64(g.n), np.asarray(x.shape), x.indptr, x.indices, x.data):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def cached_scores(cache_dir, g: SparseGraph, kind: str, params: AugmenterParams | None = None,
                  candidate_k: int = DEFAULT_CANDIDATE_K, dense_limit: int = DEFAULT_DENSE_LIMIT,
                  binarize: bool = False) -> EdgeScoreMatrix:
    """``edge_scores`` backed by an ``.npz`` cache keyed by features, kind and parameters."""
    tag = params.digest() if params is not None else "none"
    name = f"scores_{graph_digest(g)}_{kind}_{tag}_{candidate_k}_{dense_limit}_{int(binarize)}.npz"
    path = Path(cache_dir) / name
    if path.exists():
        scorer = _scorer_for(g, kind, params, binarize)
        with np.load(path) as z:
            if "tri" in z.files:
                return EdgeScoreMatrix(g.n, kind, scorer, tri=z["tri"])
            return EdgeScoreMatrix(g.n, kind, scorer, cand_keys=z["cand_keys"],
                                   cand_values=z["cand_values"])
    scores = edge_scores(g, kind, params, candidate_k, dense_limit, binarize)
    path.parent.mkdir(parents=True, exist_ok=True)
    if scores.is_dense:
        np.savez(path, tri=scores.tri)
    else:
        np.savez(path, cand_keys=scores.cand_keys, cand_values=scores.cand_values)
    return scores


def _scorer_for(g, kind, params, binarize):
    if kind == "jaccard":
        return _Jaccard(_features(g, binarize, need_binary=True))
    _require(params, kind)
    if kind == "fae":
        return _Fae(fae_embeddings(g.features, params))
    return _Sim(g.features, params.sim_weights)
