"""Inner loops of the smoothing pipeline.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with identical semantics.  The active backend is chosen at import time from
the ``AUDITVOTES_DISABLE_NUMBA`` environment variable (any non-empty value
other than ``0`` selects numpy) and can be switched later with
:func:`set_backend`.  Tests run both paths against each other; see
``benchmarks/bench_kernels.py`` for timings.
"""
from __future__ import annotations

import os
import warnings

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def _env_backend() -> str:
    flag = os.environ.get("AUDITVOTES_DISABLE_NUMBA", "").strip()
    if flag and flag != "0":
        return "numpy"
    if not HAVE_NUMBA:
        warnings.warn("numba not importable; using the numpy kernels")
        return "numpy"
    return "numba"


_BACKEND = _env_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


# ---------------------------------------------------------------------------
# first-occurrence de-duplication of a stream of draws

@njit(cache=True)
def _first_distinct_nb(draws, upper):
    words = np.zeros((upper + 63) // 64, dtype=np.uint64)
    out = np.empty(draws.shape[0], dtype=np.int64)
    k = 0
    one = np.uint64(1)
    for i in range(draws.shape[0]):
        x = draws[i]
        w = x >> 6
        bit = one << np.uint64(x & 63)
        if words[w] & bit == 0:
            words[w] |= bit
            out[k] = x
            k += 1
    return out[:k]


def _first_distinct_np(draws, upper):
    _, idx = np.unique(draws, return_index=True)
    idx.sort()
    return draws[idx]


def first_distinct(draws: np.ndarray, upper: int) -> np.ndarray:
    """Distinct values of ``draws`` (all in ``[0, upper)``) in first-seen order."""
    draws = np.ascontiguousarray(draws, dtype=np.int64)
    if _BACKEND == "numba":
        return _first_distinct_nb(draws, np.int64(upper))
    return _first_distinct_np(draws, upper)


# ---------------------------------------------------------------------------
# symmetric normalized propagation  out = D^-1/2 (A + I) D^-1/2 @ h

@njit(cache=True)
def _propagate_nb(n, src, dst, h):
    deg = np.ones(n, dtype=np.float64)
    for e in range(src.shape[0]):
        deg[src[e]] += 1.0
        deg[dst[e]] += 1.0
    inv = 1.0 / np.sqrt(deg)
    out = np.empty_like(h)
    for i in range(n):
        s = inv[i] * inv[i]
        for j in range(h.shape[1]):
            out[i, j] = s * h[i, j]
    for e in range(src.shape[0]):
        u = src[e]
        v = dst[e]
        w = inv[u] * inv[v]
        for j in range(h.shape[1]):
            out[u, j] += w * h[v, j]
            out[v, j] += w * h[u, j]
    return out


def normalized_adjacency(n: int, src: np.ndarray, dst: np.ndarray) -> sp.csr_matrix:
    deg = 1.0 + np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
    inv = 1.0 / np.sqrt(deg)
    w = inv[src] * inv[dst]
    rows = np.concatenate([src, dst, np.arange(n)])
    cols = np.concatenate([dst, src, np.arange(n)])
    vals = np.concatenate([w, w, inv * inv])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _propagate_np(n, src, dst, h):
    return normalized_adjacency(n, src, dst) @ h


def propagate(n: int, src: np.ndarray, dst: np.ndarray, h: np.ndarray) -> np.ndarray:
    """GCN propagation of dense ``h`` over the undirected edge list ``(src, dst)``."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    if _BACKEND == "numba":
        return _propagate_nb(np.int64(n), src.astype(np.int64), dst.astype(np.int64), h)
    return _propagate_np(n, src, dst, h)


# ---------------------------------------------------------------------------
# walk a score-sorted candidate list, skipping pairs already present

@njit(cache=True)
def _top_absent_nb(cand_keys, cand_scores, present, count):
    # returns (number of leading candidates to scan, position of count-th absent)
    m = present.shape[0]
    found = 0
    for i in range(cand_keys.shape[0]):
        x = cand_keys[i]
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) >> 1
            if present[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        if lo < m and present[lo] == x:
            continue
        found += 1
        if found == count:
            return i
    return -1


def _top_absent_np(cand_keys, cand_scores, present, count):
    stop = min(cand_keys.shape[0], 2 * count + 64)
    while True:
        chunk = cand_keys[:stop]
        idx = np.searchsorted(present, chunk)
        idx[idx == present.shape[0]] = 0
        absent = present[idx] != chunk if present.shape[0] else np.ones(stop, bool)
        csum = np.cumsum(absent)
        if csum.shape[0] and csum[-1] >= count:
            return int(np.searchsorted(csum, count))
        if stop == cand_keys.shape[0]:
            return -1
        stop = min(cand_keys.shape[0], 2 * stop)


def top_absent(cand_keys, cand_scores, present, count):
    """Keys among ``cand_keys`` (sorted by descending score) that are absent from
    the sorted array ``present`` and score strictly above the ``count``-th absent
    candidate.  Returns ``(keys, threshold)``; if fewer than ``count`` absent
    candidates exist, all absent candidates are returned and the threshold is
    ``-inf``."""
    if count <= 0:
        return np.empty(0, np.int64), np.inf
    present = np.ascontiguousarray(present, dtype=np.int64)
    if _BACKEND == "numba":
        pos = _top_absent_nb(cand_keys, cand_scores, present, np.int64(count))
    else:
        pos = _top_absent_np(cand_keys, cand_scores, present, count)
    if pos < 0:
        head_keys, xi = cand_keys, -np.inf
    else:
        xi = float(cand_scores[pos])
        # scores are sorted descending; strictly-greater prefix
        cut = int(np.searchsorted(-cand_scores[: pos + 1], -xi, side="left"))
        head_keys = cand_keys[:cut]
    if present.shape[0] and head_keys.shape[0]:
        idx = np.searchsorted(present, head_keys)
        idx[idx == present.shape[0]] = 0
        head_keys = head_keys[present[idx] != head_keys]
    return np.sort(head_keys), xi


# ---------------------------------------------------------------------------
# neighbor label agreement (homophily numerator)

@njit(cache=True)
def _agreement_nb(indptr, indices, labels):
    n = indptr.shape[0] - 1
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for p in range(indptr[i], indptr[i + 1]):
            if labels[indices[p]] == labels[i]:
                c += 1
        out[i] = c
    return out


def _agreement_np(indptr, indices, labels):
    n = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    same = labels[indices] == labels[rows]
    return np.bincount(rows[same], minlength=n).astype(np.int64)


def neighbor_agreement(indptr, indices, labels) -> np.ndarray:
    """Per node, the number of neighbors carrying the node's own label."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _BACKEND == "numba":
        return _agreement_nb(indptr.astype(np.int64), indices.astype(np.int64), labels)
    return _agreement_np(indptr, indices, labels)


# ---------------------------------------------------------------------------
# Poisson-Binomial pmf by sequential convolution

@njit(cache=True)
def _pb_pmf_nb(ps):
    out = np.zeros(ps.shape[0] + 1, dtype=np.float64)
    out[0] = 1.0
    for k in range(ps.shape[0]):
        p = ps[k]
        for j in range(k + 1, 0, -1):
            out[j] = out[j] * (1.0 - p) + out[j - 1] * p
        out[0] = out[0] * (1.0 - p)
    return out


def _pb_pmf_np(ps):
    out = np.zeros(ps.shape[0] + 1)
    out[0] = 1.0
    for k, p in enumerate(ps):
        out[1 : k + 2] = out[1 : k + 2] * (1.0 - p) + out[: k + 1] * p
        out[0] *= 1.0 - p
    return out


def poisson_binomial_pmf(ps) -> np.ndarray:
    ps = np.ascontiguousarray(ps, dtype=np.float64)
    if _BACKEND == "numba":
        return _pb_pmf_nb(ps)
    return _pb_pmf_np(ps)


# ---------------------------------------------------------------------------
# vote accumulation

@njit(cache=True)
def _accumulate_nb(counts, classes, passed):
    for i in range(classes.shape[0]):
        if passed[i]:
            counts[i, classes[i]] += 1


def accumulate_votes(counts: np.ndarray, classes: np.ndarray, passed: np.ndarray) -> None:
    """In place: ``counts[i, classes[i]] += 1`` wherever ``passed[i]``."""
    if _BACKEND == "numba":
        _accumulate_nb(counts, classes.astype(np.int64), passed.astype(np.bool_))
    else:
        idx = np.flatnonzero(passed)
        counts[idx, classes[idx]] += 1
