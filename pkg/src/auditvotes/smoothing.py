"""Randomization sources: sparse edge flips, hash partitions, Gaussian noise."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .graph import SparseGraph, n_pairs

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(seed: int, index: int) -> int:
    """64-bit stream seed for sample ``index`` under root ``seed``."""
    return _splitmix64(_splitmix64(seed & _MASK) ^ (index & _MASK))


def stream_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(seed, index))


@dataclass(frozen=True)
class SparseNoiseConfig:
    p_plus: float
    p_minus: float
    seed: int = 0

    def __post_init__(self):
        for name in ("p_plus", "p_minus"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class PartitionConfig:
    t_s: int
    hash_name: str = "md5"

    def __post_init__(self):
        if self.t_s < 1:
            raise ValueError("t_s must be >= 1")
        if self.hash_name != "md5":
            raise ValueError("only md5 partitioning is supported")


@dataclass(frozen=True)
class GaussianNoiseConfig:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


# ---------------------------------------------------------------------------
# sparse edge-flip noise

def _sample_distinct(rng: np.random.Generator, k: int, upper: int) -> np.ndarray:
    """``k`` distinct integers from ``[0, upper)``, uniform over k-subsets.

    The first ``k`` distinct values of an i.i.d. uniform stream form a uniform
    random subset, so we draw with replacement and de-duplicate.
    """
    if k == 0:
        return np.empty(0, np.int64)
    if 2 * k > upper:
        return np.sort(rng.choice(upper, size=k, replace=False)).astype(np.int64)
    got = np.empty(0, np.int64)
    while got.shape[0] < k:
        need = k - got.shape[0]
        # expected extra draws from collisions stay below 2x when k <= upper / 2
        batch = rng.integers(0, upper, size=int(need * 1.3) + 64, dtype=np.int64)
        got = kernels.first_distinct(np.concatenate([got, batch]), upper)
    return got[:k]


def rank_to_nonedge_key(ranks: np.ndarray, edge_keys: np.ndarray) -> np.ndarray:
    """Map the r-th non-edge (in key order) to its pair key."""
    gaps = edge_keys - np.arange(edge_keys.shape[0], dtype=np.int64)
    return ranks + np.searchsorted(gaps, ranks, side="right")


def flip_keys(keys: np.ndarray, total: int, p_plus: float, p_minus: float,
              rng: np.random.Generator) -> np.ndarray:
    """Sorted keys after deleting each of ``keys`` w.p. ``p_minus`` and adding
    each of the other ``total - len(keys)`` pairs w.p. ``p_plus``."""
    e = keys.shape[0]
    if p_minus >= 1.0:
        kept = keys[:0]
    elif p_minus > 0.0:
        kept = keys[rng.random(e) >= p_minus]
    else:
        kept = keys
    if p_plus <= 0.0:
        return kept.copy()
    m = total - e
    k = int(rng.binomial(m, p_plus))
    added = rank_to_nonedge_key(_sample_distinct(rng, k, m), keys)
    out = np.concatenate([kept, added])
    out.sort()
    return out


def sample_sparse_noise(g: SparseGraph, cfg: SparseNoiseConfig, sample_index: int) -> SparseGraph:
    """One draw of the edge-flip noise; deterministic in ``(cfg.seed, sample_index)``."""
    rng = stream_rng(cfg.seed, sample_index)
    return g.with_keys(flip_keys(g.keys, n_pairs(g.n), cfg.p_plus, cfg.p_minus, rng))


def expected_noisy_edges(g: SparseGraph, cfg: SparseNoiseConfig) -> float:
    e = g.num_edges
    return e * (1.0 - cfg.p_minus) + (n_pairs(g.n) - e) * cfg.p_plus


# ---------------------------------------------------------------------------
# hash partition

def _external_ids(n: int, id_map) -> list[str]:
    if id_map is None:
        return [str(i) for i in range(n)]
    if isinstance(id_map, Mapping):
        ext = [None] * n
        for k, v in id_map.items():
            if 0 <= v < n:
                ext[v] = str(k)
    else:
        ext = [str(s) for s in id_map]
        ext += [None] * (n - len(ext))
    missing = [i for i, s in enumerate(ext) if s is None]
    if missing:
        raise KeyError(f"no external id for node(s) {missing[:5]}")
    return ext


def edge_group(s_u: str, s_v: str, t_s: int) -> int:
    """0-based group of the undirected edge between external ids ``s_u``, ``s_v``."""
    a, b = (s_u, s_v) if s_u <= s_v else (s_v, s_u)
    digest = hashlib.md5((a + b).encode("utf-8")).digest()
    return int.from_bytes(digest, "big") % t_s


def edge_groups(g: SparseGraph, cfg: PartitionConfig, id_map=None) -> np.ndarray:
    ext = _external_ids(g.n, id_map)
    e = g.edges
    return np.fromiter((edge_group(ext[u], ext[v], cfg.t_s) for u, v in e),
                       dtype=np.int64, count=e.shape[0])


def hash_partition(g: SparseGraph, cfg: PartitionConfig,
                   id_map: Mapping[str, int] | Sequence[str] | None = None) -> list[SparseGraph]:
    """Split the edge set into ``cfg.t_s`` disjoint subgraphs on the full node set.

    ``id_map`` maps external string ids to internal ids (or lists the external
    id of each internal node); by default node ``i`` is called ``str(i)``.
    """
    groups = edge_groups(g, cfg, id_map)
    if log.isEnabledFor(logging.DEBUG):
        sizes = np.bincount(groups, minlength=cfg.t_s)
        log.debug("partition sizes (groups 1..%d): %s", cfg.t_s, sizes.tolist())
    return [g.with_keys(g.keys[groups == t]) for t in range(cfg.t_s)]


# ---------------------------------------------------------------------------
# Gaussian noise

def sample_gaussian_noise(x: np.ndarray, cfg: GaussianNoiseConfig, sample_index: int) -> np.ndarray:
    rng = stream_rng(cfg.seed, sample_index)
    x = np.asarray(x, dtype=np.float64)
    return x + cfg.sigma * rng.standard_normal(x.shape)
