"""Filtered vote collection, Clopper-Pearson bounds and the abstention test."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import beta, binom

from . import kernels
from .classifiers import Prediction
from .graph import SparseGraph, node_homophily

FILTER_KINDS = ("none", "confidence", "homophily", "jsd")


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "none"
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.kind in ("confidence", "homophily") and not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1] for this filter")
        if self.kind == "jsd" and not self.theta >= 0.0:
            raise ValueError("theta must be a non-negative divergence")


def _entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=-1)


def neighbor_jsd(g: SparseGraph, probs: np.ndarray) -> np.ndarray:
    """H(mean neighbor distribution) - mean neighbor entropy; 0 for isolated nodes."""
    a = g.adjacency
    deg = g.degree.astype(np.float64)
    out = np.zeros(g.n)
    nz = deg > 0
    mean_p = np.asarray(a @ probs)[nz] / deg[nz, None]
    mean_h = np.asarray(a @ _entropy(probs))[nz] / deg[nz]
    out[nz] = _entropy(mean_p) - mean_h
    return np.maximum(out, 0.0)


def filter_value(pred: Prediction, g_sample: SparseGraph, kind: str) -> np.ndarray:
    if kind == "confidence":
        return pred.confidence
    if kind == "homophily":
        return node_homophily(g_sample, pred.class_index)
    if kind == "jsd":
        return neighbor_jsd(g_sample, pred.probabilities)
    if kind == "none":
        return np.ones(pred.probabilities.shape[0])
    raise ValueError(f"unknown filter kind {kind!r}")


def filter_pass(pred: Prediction, g_sample: SparseGraph, cfg: FilterConfig) -> np.ndarray:
    """Boolean vote mask: value > theta, except jsd which passes below theta."""
    if cfg.kind == "none":
        return np.ones(pred.probabilities.shape[0], dtype=bool)
    v = filter_value(pred, g_sample, cfg.kind)
    return v < cfg.theta if cfg.kind == "jsd" else v > cfg.theta


@dataclass
class VoteTally:
    """Per-node class counts of filtered-in votes out of ``n_total`` samples."""

    counts: np.ndarray  # nodes x classes (or a single class vector)
    n_total: int

    @property
    def n_valid(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[-1]

    def node(self, i: int) -> "VoteTally":
        return VoteTally(self.counts[i], self.n_total)

    def merge(self, other: "VoteTally") -> "VoteTally":
        return VoteTally(self.counts + other.counts, self.n_total + other.n_total)


class VoteAccumulator:
    """Running tally; accumulators over disjoint sample sets merge by addition."""

    def __init__(self, n: int, n_classes: int, cfg: FilterConfig):
        self.cfg = cfg
        self.counts = np.zeros((n, n_classes), dtype=np.int64)
        self.n_total = 0

    def add(self, pred: Prediction, g_sample: SparseGraph | None = None,
            nodes: np.ndarray | None = None) -> None:
        """Record one sample; ``nodes`` restricts voting to those rows of ``pred``."""
        passed = filter_pass(pred, g_sample, self.cfg)
        cls = pred.class_index
        if nodes is not None:
            passed, cls = passed[nodes], cls[nodes]
        kernels.accumulate_votes(self.counts, cls, passed)
        self.n_total += 1

    def tally(self) -> VoteTally:
        return VoteTally(self.counts.copy(), self.n_total)


def tally_votes(stream: Iterable, cfg: FilterConfig, n_classes: int,
                nodes: np.ndarray | None = None) -> VoteTally:
    """Tally a stream of ``(sample_index, Prediction, sample_graph)`` triples."""
    acc = None
    for _, pred, g_sample in stream:
        if acc is None:
            n = pred.probabilities.shape[0] if nodes is None else len(nodes)
            acc = VoteAccumulator(n, n_classes, cfg)
        acc.add(pred, g_sample, nodes)
    if acc is None:
        raise ValueError("empty prediction stream")
    return acc.tally()


def count_votes(classes: np.ndarray, n_classes: int) -> VoteTally:
    """Unfiltered tally from a (samples x nodes) array of predicted classes."""
    classes = np.asarray(classes, dtype=np.int64)
    s, n = classes.shape
    flat = (np.arange(n)[None, :] * n_classes + classes).ravel()
    return VoteTally(np.bincount(flat, minlength=n * n_classes).reshape(n, n_classes), s)


def top_two(counts: np.ndarray):
    """Indices and counts of the two largest classes; ties go to the smaller index."""
    counts = np.asarray(counts)
    y_a = np.argmax(counts, axis=-1)
    masked = counts.astype(np.int64).copy()
    np.put_along_axis(masked, np.expand_dims(y_a, -1), -1, axis=-1)
    y_b = np.argmax(masked, axis=-1)
    n_a = np.take_along_axis(counts, np.expand_dims(y_a, -1), -1)[..., 0]
    n_b = np.take_along_axis(counts, np.expand_dims(y_b, -1), -1)[..., 0]
    if counts.shape[-1] == 1:
        n_b = np.zeros_like(n_b)
    return y_a, y_b, n_a, n_b


@dataclass
class ProbabilityBounds:
    p_a_lower: np.ndarray
    p_b_upper: np.ndarray
    alpha: float
    y_a: np.ndarray = field(default=None)
    y_b: np.ndarray = field(default=None)


def clopper_pearson_bounds(tally: VoteTally, alpha: float, n_classes: int | None = None,
                           bonferroni: bool = True) -> ProbabilityBounds:
    """One-sided Clopper-Pearson bounds on the top-two class probabilities.

    Each bound holds at level ``alpha / n_classes`` (plain ``alpha`` with
    ``bonferroni=False``).  Nodes without valid votes get the vacuous bounds
    (0, 1) and should be routed to abstention.
    """
    c = n_classes or tally.num_classes
    a = alpha / c if bonferroni else alpha
    y_a, y_b, n_a, n_b = top_two(tally.counts)
    nv = tally.n_valid
    n_a = np.asarray(n_a, dtype=np.float64)
    n_b = np.asarray(n_b, dtype=np.float64)
    nv = np.asarray(nv, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        lo = np.where(n_a > 0, beta.ppf(a, np.maximum(n_a, 1), nv - n_a + 1), 0.0)
        hi = np.where(n_b < nv, beta.ppf(1.0 - a, n_b + 1, np.maximum(nv - n_b, 1)), 1.0)
    lo = np.where(nv > 0, lo, 0.0)
    hi = np.where(nv > 0, np.minimum(1.0 - lo, hi), 1.0)
    return ProbabilityBounds(lo, hi, alpha, y_a, y_b)


def binomial_pvalue(n_a, n_b) -> np.ndarray:
    """Two-sided exact binomial test of ``n_a`` successes in ``n_a + n_b`` at p = 1/2."""
    n_a = np.asarray(n_a)
    n_b = np.asarray(n_b)
    k = np.minimum(n_a, n_b)
    p = 2.0 * binom.cdf(k, n_a + n_b, 0.5)
    return np.where(n_a == n_b, 1.0, np.minimum(p, 1.0))


def abstain_test(tally: VoteTally, alpha: float) -> np.ndarray:
    """True where the node abstains."""
    _, _, n_a, n_b = top_two(tally.counts)
    return (binomial_pvalue(n_a, n_b) > alpha) | (tally.n_valid == 0)


def write_tallies(path, tally: VoteTally, nodes: np.ndarray | None = None) -> None:
    counts = np.atleast_2d(tally.counts)
    nodes = np.arange(counts.shape[0]) if nodes is None else nodes
    nv = counts.sum(axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "class", "count", "n_valid", "n_total"])
        for i, node in enumerate(nodes):
            for c in range(counts.shape[1]):
                w.writerow([int(node), c, int(counts[i, c]), int(nv[i]), tally.n_total])


def read_tallies(path) -> tuple[np.ndarray, VoteTally]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    nodes = np.unique(rows[:, 0])
    c = int(rows[:, 1].max()) + 1
    counts = np.zeros((nodes.shape[0], c), dtype=np.int64)
    counts[np.searchsorted(nodes, rows[:, 0]), rows[:, 1]] = rows[:, 2]
    return nodes, VoteTally(counts, int(rows[0, 4]))
