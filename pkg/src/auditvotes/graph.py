"""Graph representation, dataset files, inductive splits, SBM fixtures and stats."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata

from . import kernels

log = logging.getLogger(__name__)

SPLIT_TAGS = ("ltrain", "utrain", "val", "test")


class DatasetFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pair <-> key encoding.  Unordered pairs u < v are numbered row-major over the
# strict upper triangle, so sorted keys are sorted (u, v) tuples.

def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def pair_keys(u, v, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    return lo * (2 * n - lo - 1) // 2 + (hi - lo - 1)


def decode_keys(keys, n: int) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    b = 2 * n - 1
    u = np.floor((b - np.sqrt(np.maximum(b * b - 8.0 * keys, 0.0))) / 2).astype(np.int64)
    u = np.clip(u, 0, max(n - 2, 0))
    # float rounding can leave u off by one in either direction
    start = u * (2 * n - u - 1) // 2
    low = keys < start
    u[low] -= 1
    start = u * (2 * n - u - 1) // 2
    nxt = (u + 1) * (2 * n - u - 2) // 2
    high = keys >= nxt
    u[high] += 1
    start = u * (2 * n - u - 1) // 2
    v = keys - start + u + 1
    return u, v


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected, self-loop-free graph with sparse binary node features.

    ``keys`` holds the sorted, unique pair keys of the edges (see
    :func:`pair_keys`); everything else is derived lazily.  Instances are
    treated as immutable.
    """

    n: int
    keys: np.ndarray
    features: sp.csr_matrix
    labels: np.ndarray | None = None

    @classmethod
    def from_edges(cls, n, edges, features=None, labels=None) -> "SparseGraph":
        """Canonicalize an arbitrary edge list: symmetrize, drop loops and duplicates."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise IndexError(f"edge endpoint outside [0, {n})")
        edges = edges[edges[:, 0] != edges[:, 1]]
        keys = np.unique(pair_keys(edges[:, 0], edges[:, 1], n))
        if features is None:
            features = sp.identity(n, format="csr")
        return cls(n, keys, sp.csr_matrix(features, dtype=np.float64),
                   None if labels is None else np.asarray(labels, dtype=np.int64))

    def with_keys(self, keys: np.ndarray) -> "SparseGraph":
        """Same nodes, features and labels; new (already canonical) edge keys."""
        return SparseGraph(self.n, keys, self.features, self.labels)

    @property
    def num_edges(self) -> int:
        return int(self.keys.shape[0])

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and self.labels.size else 0

    @cached_property
    def edges(self) -> np.ndarray:
        u, v = decode_keys(self.keys, self.n)
        return np.stack([u, v], axis=1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        data = np.ones(2 * e.shape[0])
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))
        a.sort_indices()
        return a

    @property
    def indptr(self) -> np.ndarray:
        return self.adjacency.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.adjacency.indices

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v] : a.indptr[v + 1]]

    def has_binary_features(self) -> bool:
        d = self.features.data
        return bool(np.all((d == 0) | (d == 1)))

    def subgraph(self, nodes) -> "SparseGraph":
        """Induced subgraph; node ``nodes[i]`` (sorted) becomes node ``i``."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.shape[0])
        e = self.edges
        ru, rv = remap[e[:, 0]], remap[e[:, 1]]
        keep = (ru >= 0) & (rv >= 0)
        k = nodes.shape[0]
        keys = np.sort(pair_keys(ru[keep], rv[keep], k))
        labels = None if self.labels is None else self.labels[nodes]
        return SparseGraph(k, keys, self.features[nodes], labels)

    def check(self) -> None:
        """Raise ``AssertionError`` if a structural invariant is broken."""
        assert self.keys.ndim == 1
        assert np.all(np.diff(self.keys) > 0), "edge keys must be sorted and unique"
        if self.keys.size:
            assert 0 <= self.keys[0] and self.keys[-1] < n_pairs(self.n)
        assert self.features.shape[0] == self.n
        a = self.adjacency
        assert (a != a.T).nnz == 0
        assert a.diagonal().sum() == 0


# ---------------------------------------------------------------------------
# file formats

def _tokens(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, s.split("\t")


def _node(tok: str, path, lineno, id_map: dict | None) -> int:
    if id_map is not None:
        try:
            return id_map[tok]
        except KeyError:
            raise DatasetFormatError(f"{path}:{lineno}: unknown node id {tok!r}") from None
    try:
        return int(tok)
    except ValueError:
        raise DatasetFormatError(f"{path}:{lineno}: bad node id {tok!r}") from None


def read_id_map(path) -> dict[str, int]:
    out = {}
    for lineno, t in _tokens(Path(path)):
        if len(t) != 2:
            raise DatasetFormatError(f"{path}:{lineno}: expected 'external<TAB>internal'")
        out[t[0]] = int(t[1])
    return out


def write_id_map(path, id_map: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ext, internal in sorted(id_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{ext}\t{internal}\n")


def default_id_map(n: int) -> dict[str, int]:
    return {str(i): i for i in range(n)}


def load_dataset(edge_path, feature_path, label_path=None, id_map=None,
                 binarize: bool = False) -> SparseGraph:
    """Read the tab-separated edge / feature / label files into a graph.

    The feature header fixes ``n``; every node id must be below it.  With
    ``binarize`` all nonzero feature values become 1.
    """
    feature_path = Path(feature_path)
    it = _tokens(feature_path)
    try:
        lineno, head = next(it)
        n, d = int(head[0]), int(head[1])
    except (StopIteration, ValueError, IndexError):
        raise DatasetFormatError(f"{feature_path}:1: expected header 'n<TAB>d'") from None
    rows, cols, vals = [], [], []
    for lineno, t in it:
        if len(t) != 3:
            raise DatasetFormatError(f"{feature_path}:{lineno}: expected 'node<TAB>dim<TAB>value'")
        i = _node(t[0], feature_path, lineno, id_map)
        try:
            j, x = int(t[1]), float(t[2])
        except ValueError:
            raise DatasetFormatError(f"{feature_path}:{lineno}: malformed triplet") from None
        if not 0 <= i < n or not 0 <= j < d:
            raise IndexError(f"{feature_path}:{lineno}: entry ({i}, {j}) outside {n}x{d}")
        rows.append(i), cols.append(j), vals.append(x)
    feats = sp.csr_matrix((np.asarray(vals, float), (rows, cols)), shape=(n, d))
    feats.sum_duplicates()
    feats.eliminate_zeros()
    if binarize:
        feats.data[:] = 1.0

    edge_path = Path(edge_path)
    pairs = []
    for lineno, t in _tokens(edge_path):
        if len(t) != 2:
            raise DatasetFormatError(f"{edge_path}:{lineno}: expected 'u<TAB>v'")
        u, v = (_node(x, edge_path, lineno, id_map) for x in t)
        if not (0 <= u < n and 0 <= v < n):
            raise IndexError(f"{edge_path}:{lineno}: node id >= declared n={n}")
        pairs.append((u, v))

    labels = None
    if label_path is not None:
        label_path = Path(label_path)
        labels = np.full(n, -1, dtype=np.int64)
        for lineno, t in _tokens(label_path):
            if len(t) != 2:
                raise DatasetFormatError(f"{label_path}:{lineno}: expected 'node<TAB>class'")
            i = _node(t[0], label_path, lineno, id_map)
            if not 0 <= i < n:
                raise IndexError(f"{label_path}:{lineno}: node id >= declared n={n}")
            try:
                labels[i] = int(t[1])
            except ValueError:
                raise DatasetFormatError(f"{label_path}:{lineno}: bad class {t[1]!r}") from None
    return SparseGraph.from_edges(n, np.asarray(pairs, dtype=np.int64).reshape(-1, 2), feats, labels)


def save_dataset(g: SparseGraph, edge_path, feature_path, label_path=None) -> None:
    with open(edge_path, "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    coo = g.features.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(feature_path, "w", encoding="utf-8") as fh:
        fh.write(f"{g.n}\t{g.num_features}\n")
        for i, j, x in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i}\t{j}\t{x:.17g}\n")
    if label_path is not None and g.labels is not None:
        with open(label_path, "w", encoding="utf-8") as fh:
            for i, c in enumerate(g.labels):
                fh.write(f"{i}\t{c}\n")


# ---------------------------------------------------------------------------
# inductive split

@dataclass(frozen=True)
class InductiveSplit:
    labeled_train: np.ndarray
    unlabeled_train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    @property
    def train_nodes(self) -> np.ndarray:
        return np.union1d(self.labeled_train, self.unlabeled_train)

    @property
    def val_graph_nodes(self) -> np.ndarray:
        return np.union1d(self.train_nodes, self.validation)

    @property
    def n(self) -> int:
        return sum(len(s) for s in (self.labeled_train, self.unlabeled_train,
                                    self.validation, self.test))

    def tags(self) -> np.ndarray:
        out = np.empty(self.n, dtype=object)
        for tag, nodes in zip(SPLIT_TAGS, (self.labeled_train, self.unlabeled_train,
                                           self.validation, self.test)):
            out[nodes] = tag
        return out


def make_inductive_split(g: SparseGraph, per_class_labeled: int, test_fraction: float,
                         seed: int) -> InductiveSplit:
    """Per class: ``per_class_labeled`` labeled-train and validation nodes, a
    ``test_fraction`` share for test, the rest unlabeled-train."""
    if g.labels is None:
        raise SplitError("graph has no labels")
    if not 0 < test_fraction < 1:
        raise SplitError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    parts = {t: [] for t in SPLIT_TAGS}
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size == 0:
            continue
        if members.size < 2 * per_class_labeled + 1:
            raise SplitError(f"class {c} has {members.size} nodes, needs "
                             f">= {2 * per_class_labeled + 1}")
        members = rng.permutation(members)
        k = per_class_labeled
        rest = members.size - 2 * k
        n_test = min(rest, max(1, int(math.floor(test_fraction * members.size + 0.5))))
        parts["ltrain"].append(members[:k])
        parts["val"].append(members[k : 2 * k])
        parts["test"].append(members[2 * k : 2 * k + n_test])
        parts["utrain"].append(members[2 * k + n_test :])
    cat = {t: np.sort(np.concatenate(v)) if v else np.empty(0, np.int64) for t, v in parts.items()}
    return InductiveSplit(cat["ltrain"], cat["utrain"], cat["val"], cat["test"])


def write_split(path, split: InductiveSplit) -> None:
    tags = split.tags()
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in enumerate(tags):
            fh.write(f"{i}\t{t}\n")


def read_split(path) -> InductiveSplit:
    parts = {t: [] for t in SPLIT_TAGS}
    for lineno, t in _tokens(Path(path)):
        if len(t) != 2 or t[1] not in parts:
            raise DatasetFormatError(f"{path}:{lineno}: expected 'node<TAB>{{ltrain|utrain|val|test}}'")
        parts[t[1]].append(int(t[0]))
    return InductiveSplit(*(np.sort(np.asarray(parts[t], dtype=np.int64)) for t in SPLIT_TAGS))


# ---------------------------------------------------------------------------
# stochastic block model fixture

def generate_sbm(classes: int, nodes_per_class: int, p_in: float, p_out: float,
                 feature_dim: int, feature_signal: float, seed: int) -> SparseGraph:
    """Planted-partition graph with class-correlated binary features.

    Feature dimensions are split into ``classes`` signature blocks.  A node's
    own block is active with probability ``feature_signal``; every other
    dimension with ``(1 - feature_signal) / classes``.
    """
    if not 0 <= p_out <= p_in <= 1:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if not 0 <= feature_signal <= 1:
        raise ValueError("feature_signal must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes), nodes_per_class)
    u, v = np.triu_indices(n, k=1)
    prob = np.where(labels[u] == labels[v], p_in, p_out)
    hit = rng.random(u.shape[0]) < prob
    keys = pair_keys(u[hit], v[hit], n)

    block = np.arange(feature_dim) * classes // max(feature_dim, 1)
    p_feat = np.where(block[None, :] == labels[:, None], feature_signal,
                      (1.0 - feature_signal) / classes)
    x = (rng.random((n, feature_dim)) < p_feat).astype(np.float64)
    return SparseGraph(n, np.sort(keys), sp.csr_matrix(x), labels)


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class GraphStats:
    edge_sparsity: float
    homophily_mean: float
    reconstruction_auc: float | None = None


def node_homophily(g: SparseGraph, labels) -> np.ndarray:
    """Share of each node's neighbors with the same label; 0 for isolated nodes."""
    labels = np.asarray(labels)
    if labels.shape[0] != g.n:
        raise ValueError(f"{labels.shape[0]} labels for {g.n} nodes")
    same = kernels.neighbor_agreement(g.indptr, g.indices, labels)
    deg = g.degree
    out = np.zeros(g.n)
    nz = deg > 0
    out[nz] = same[nz] / deg[nz]
    return out


def edge_sparsity(g: SparseGraph) -> float:
    return 2.0 * g.num_edges / float(g.n) ** 2 if g.n else 0.0


EXACT_AUC_PAIR_LIMIT = 10_000_000


def reconstruction_auc(reference: SparseGraph, scores, n_samples: int = 1_000_000,
                       seed: int = 0) -> float:
    """P(score of a random reference edge > score of a random non-edge), ties 1/2.

    Exact (rank-sum over all unordered pairs) when the number of edge/non-edge
    comparisons is at most ``EXACT_AUC_PAIR_LIMIT``, otherwise estimated from
    ``n_samples`` sampled comparisons.
    """
    n = reference.n
    total = n_pairs(n)
    n_pos = reference.num_edges
    n_neg = total - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one edge and one non-edge")
    if n_pos * n_neg <= EXACT_AUC_PAIR_LIMIT:
        s = scores.all_pair_scores()
        ranks = rankdata(s)
        pos_rank_sum = ranks[reference.keys].sum()
        return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    rng = np.random.default_rng(seed)
    e = reference.edges[rng.integers(0, n_pos, n_samples)]
    neg = rng.integers(0, total, 2 * n_samples)
    neg = neg[~np.isin(neg, reference.keys)][:n_samples]
    nu, nv = decode_keys(neg, n)
    sp_ = scores.pair_scores(e[:, 0], e[:, 1])
    sn = scores.pair_scores(nu, nv)
    m = min(sp_.shape[0], sn.shape[0])
    return float(np.mean((sp_[:m] > sn[:m]) + 0.5 * (sp_[:m] == sn[:m])))


def graph_stats(g: SparseGraph, pseudo_labels, reference: SparseGraph | None = None,
                scores=None) -> GraphStats:
    homo = float(node_homophily(g, pseudo_labels).mean()) if g.n else 0.0
    auc = None
    if reference is not None or scores is not None:
        if reference is None or scores is None:
            raise ValueError("reconstruction AUC needs both reference and scores")
        auc = reconstruction_auc(reference, scores)
    return GraphStats(edge_sparsity(g), homo, auc)
