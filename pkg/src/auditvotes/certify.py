"""Certificates for edge-flip smoothing, hash-partition voting and Gaussian smoothing.

For a budget of ``r_a`` additions and ``r_d`` deletions the outcome space splits
into regions of constant likelihood ratio between the clean and the perturbed
graph.  The worst-case classifier fills those regions greedily; the resulting
margin is positive exactly when the smoothed prediction provably survives.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.stats import norm

from . import kernels
from .smoothing import SparseNoiseConfig
from .voting import (ProbabilityBounds, VoteTally, abstain_test, clopper_pearson_bounds,
                     count_votes)

log = logging.getLogger(__name__)

CERTIFIED, NOT_CERTIFIED, ABSTAIN = 1, 0, -1
_MERGE_TOL = 1e-12
STATUS_NAMES = {CERTIFIED: "certified", NOT_CERTIFIED: "not_certified", ABSTAIN: "abstain"}


@dataclass(frozen=True, eq=False)
class RegionTable:
    """Constant-likelihood-ratio regions, sorted by decreasing ratio.

    Regions with zero mass under both distributions are dropped and regions
    with identical ratio are merged, so ``log_ratios`` is strictly decreasing.
    ``+inf`` / ``-inf`` log-ratios mark regions reachable only from the clean
    or only from the perturbed graph.
    """

    budget: tuple[int, int]
    log_ratios: np.ndarray
    r: np.ndarray
    r_prime: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_ratios)

    def __len__(self) -> int:
        return self.r.shape[0]


def _log_pow(base_num: float, base_den: float, expo: int) -> float:
    """expo * log(base_num / base_den) with 0 * log(anything) = 0."""
    if expo == 0:
        return 0.0
    if base_num == 0.0 and base_den == 0.0:
        return math.nan
    if base_num == 0.0:
        return -math.inf if expo > 0 else math.inf
    if base_den == 0.0:
        return math.inf if expo > 0 else -math.inf
    return expo * (math.log(base_num) - math.log(base_den))


def region_table(cfg: SparseNoiseConfig, r_a: int, r_d: int) -> RegionTable:
    return _region_table(float(cfg.p_plus), float(cfg.p_minus), int(r_a), int(r_d))


@lru_cache(maxsize=4096)
def _region_table(pp: float, pm: float, r_a: int, r_d: int) -> RegionTable:
    if r_a < 0 or r_d < 0:
        raise ValueError("budgets must be non-negative")
    if not (0 < pp < 1 or 0 < pm < 1):
        raise ValueError("need 0 < p_plus < 1 or 0 < p_minus < 1")
    r = kernels.poisson_binomial_pmf(np.array([pp] * r_a + [pm] * r_d))
    rp = kernels.poisson_binomial_pmf(np.array([1.0 - pm] * r_a + [1.0 - pp] * r_d))
    logc = np.empty(r_a + r_d + 1)
    for i in range(r_a + r_d + 1):
        a = _log_pow(pp, 1.0 - pm, i - r_d)
        b = _log_pow(pm, 1.0 - pp, i - r_a)
        v = a + b if not (math.isnan(a) or math.isnan(b)) else math.nan
        if math.isnan(v):
            # undefined ratio: classify the region by where its mass lives
            v = (math.inf if rp[i] == 0 else -math.inf if r[i] == 0
                 else math.log(r[i]) - math.log(rp[i]))
        logc[i] = v
    keep = (r > 0) | (rp > 0)
    logc, r, rp = logc[keep], r[keep], rp[keep]
    order = np.argsort(-logc, kind="stable")
    logc, r, rp = logc[order], r[order], rp[order]
    # ratios equal up to rounding (p_plus + p_minus = 1 gives all ones) form one region
    with np.errstate(invalid="ignore"):
        gap = logc[:-1] - logc[1:]
    # infinite log-ratios only merge with their own kind
    finite = np.isfinite(logc[:-1]) & np.isfinite(logc[1:])
    tol = _MERGE_TOL * np.maximum(1.0, np.abs(np.where(finite, logc[:-1], 0.0)))
    new = ~((finite & (gap <= tol)) | (logc[:-1] == logc[1:]))
    start = np.flatnonzero(np.concatenate([[True], new]))
    if start.shape[0] < logc.shape[0]:
        r = np.add.reduceat(r, start)
        rp = np.add.reduceat(rp, start)
        head = logc[start]
        with np.errstate(divide="ignore"):
            logc = np.where(np.isfinite(head) & (r > 0) & (rp > 0), np.log(r) - np.log(rp), head)
    for a in (logc, r, rp):
        a.setflags(write=False)
    return RegionTable((r_a, r_d), logc, r, rp)


def identity_table() -> RegionTable:
    one = np.ones(1)
    return RegionTable((0, 0), np.zeros(1), one, one)


# ---------------------------------------------------------------------------
# worst-case margin

@dataclass(frozen=True)
class MarginResult:
    mu: float
    certified: bool


class _Greedy:
    """Prefix sums for filling regions in ratio order, vectorized over bounds."""

    def __init__(self, t: RegionTable):
        pos = t.r > 0
        # s: regions by decreasing ratio (table order); zero-mass regions never help
        self.s_r = t.r[pos]
        self.s_rp = t.r_prime[pos]
        self.s_cr = np.cumsum(self.s_r)
        self.s_crp = np.cumsum(self.s_rp)
        # t: increasing ratio; regions invisible under the clean graph come free
        self.t_r = self.s_r[::-1]
        self.t_rp = self.s_rp[::-1]
        self.t_cr = np.cumsum(self.t_r)
        self.t_crp = np.cumsum(self.t_rp)
        self.free = float(t.r_prime[~pos].sum())

    @staticmethod
    def _fill(p, r, rp, cr, crp):
        k = np.minimum(np.searchsorted(cr, p, side="left"), r.shape[0] - 1)
        prev = np.maximum(k - 1, 0)
        before = np.where(k > 0, cr[prev], 0.0)
        full = np.where(k > 0, crp[prev], 0.0)
        frac = np.clip((p - before) / r[k], 0.0, 1.0)
        return full + frac * rp[k]

    def margin(self, p_a, p_b):
        p_a = np.asarray(p_a, dtype=np.float64)
        p_b = np.asarray(p_b, dtype=np.float64)
        s = self._fill(p_a, self.s_r, self.s_rp, self.s_cr, self.s_crp)
        t = self.free + self._fill(p_b, self.t_r, self.t_rp, self.t_cr, self.t_crp)
        return s - t


def _clamp_bounds(p_a, p_b):
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    over = p_a + p_b > 1.0
    if np.any(over):
        warnings.warn("p_a_lower + p_b_upper > 1; clamping p_b_upper to 1 - p_a_lower")
        p_b = np.where(over, 1.0 - p_a, p_b)
    return p_a, p_b


def margins(table: RegionTable, p_a, p_b) -> np.ndarray:
    p_a, p_b = _clamp_bounds(p_a, p_b)
    return np.clip(_Greedy(table).margin(p_a, p_b), -1.0, 1.0)


def worst_case_margin(table: RegionTable, bounds: ProbabilityBounds) -> MarginResult:
    mu = float(margins(table, bounds.p_a_lower, bounds.p_b_upper))
    return MarginResult(mu, mu > 0)


# ---------------------------------------------------------------------------
# exact rational oracle

def _knapsack(r, rp, target: Fraction, minimize: bool) -> Fraction:
    """min / max sum x_i rp_i over x in [0,1]^I with sum x_i r_i = target."""
    total = sum(r, Fraction(0))
    if target < 0 or target > total:
        raise ValueError("infeasible margin constraints")
    free = [i for i in range(len(r)) if r[i] == 0]
    paid = [i for i in range(len(r)) if r[i] != 0]
    # value per unit of r mass, compared exactly
    paid.sort(key=lambda i: rp[i] / r[i], reverse=not minimize)
    acc = Fraction(0) if minimize else sum((rp[i] for i in free), Fraction(0))
    left = target
    for i in paid:
        if left == 0:
            break
        take = min(left, r[i])
        acc += take / r[i] * rp[i]
        left -= take
    return acc


def _vertices(r, rp, target: Fraction, minimize: bool) -> Fraction:
    """Same problem by enumerating the vertices of the feasible polytope."""
    m = len(r)
    best = None
    for j in range(-1, m):
        others = [i for i in range(m) if i != j]
        for bits in product((0, 1), repeat=len(others)):
            used = sum((r[i] for i, b in zip(others, bits) if b), Fraction(0))
            val = sum((rp[i] for i, b in zip(others, bits) if b), Fraction(0))
            if j < 0:
                if used != target:
                    continue
            else:
                if r[j] == 0:
                    continue
                xj = (target - used) / r[j]
                if not 0 <= xj <= 1:
                    continue
                val += xj * rp[j]
            if best is None or (val < best if minimize else val > best):
                best = val
    if best is None:
        raise ValueError("infeasible margin constraints")
    return best


def exact_margin_oracle(table: RegionTable, bounds: ProbabilityBounds,
                        method: str = "auto") -> float:
    """Exact optimum of the margin program in rational arithmetic.

    ``method`` is ``"knapsack"`` (exact ratio ordering), ``"vertices"`` (full
    vertex enumeration, small tables only) or ``"auto"``.
    """
    if len(table) > 30:
        raise ValueError("oracle limited to 30 regions")
    r = [Fraction(float(x)) for x in table.r]
    rp = [Fraction(float(x)) for x in table.r_prime]
    pa = Fraction(float(np.asarray(bounds.p_a_lower)))
    pb = Fraction(float(np.asarray(bounds.p_b_upper)))
    if pa + pb > 1:
        raise ValueError("p_a_lower + p_b_upper > 1")
    # float rounding can leave the region masses a hair below 1
    total = sum(r, Fraction(0))
    pa, pb = min(pa, total), min(pb, total)
    if method == "auto":
        method = "vertices" if len(r) <= 8 else "knapsack"
    solve = _vertices if method == "vertices" else _knapsack
    s = solve(r, rp, pa, minimize=True)
    t = solve(r, rp, pb, minimize=False)
    return float(s - t)


# ---------------------------------------------------------------------------
# per-node and grid certification

def certify_node(tally: VoteTally, cfg: SparseNoiseConfig, alpha: float, n_classes: int,
                 budget: tuple[int, int]) -> tuple[int, int]:
    """Returns ``(status, y_A)`` with status CERTIFIED / NOT_CERTIFIED / ABSTAIN."""
    y_a = int(np.argmax(tally.counts))
    if bool(abstain_test(tally, alpha)):
        return ABSTAIN, y_a
    b = clopper_pearson_bounds(tally, alpha, n_classes)
    table = identity_table() if tuple(budget) == (0, 0) else region_table(cfg, *budget)
    return (CERTIFIED if worst_case_margin(table, b).certified else NOT_CERTIFIED), y_a


@dataclass
class CertificateGrid:
    """``status[node, r_a, r_d]`` in {1 certified, 0 not certified, -1 abstain}."""

    nodes: np.ndarray
    status: np.ndarray
    prediction: np.ndarray
    labels: np.ndarray | None = None

    @property
    def correct(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("grid has no labels")
        return self.prediction == self.labels

    @property
    def abstained(self) -> np.ndarray:
        return self.status[:, 0, 0] == ABSTAIN

    def clean_accuracy(self) -> float:
        return float(np.mean(self.correct)) if self.nodes.size else 0.0

    def abstain_rate(self) -> float:
        return float(np.mean(self.abstained)) if self.nodes.size else 0.0

    def certified_accuracy(self) -> np.ndarray:
        """(max_ra + 1) x (max_rd + 1); abstentions count as wrong and uncertified."""
        if not self.nodes.size:
            return np.zeros(self.status.shape[1:])
        ok = (self.status == CERTIFIED) & self.correct[:, None, None]
        return ok.mean(axis=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "ra", "rd", "status"])
            for i, node in enumerate(self.nodes):
                for ra in range(self.status.shape[1]):
                    for rd in range(self.status.shape[2]):
                        w.writerow([int(node), ra, rd, STATUS_NAMES[int(self.status[i, ra, rd])]])

    def summary(self) -> dict:
        out = {"nodes": int(self.nodes.size), "abstain_rate": round(self.abstain_rate(), 6)}
        if self.labels is not None:
            ca = self.certified_accuracy()
            out["clean_accuracy"] = round(self.clean_accuracy(), 6)
            out["certified_accuracy"] = {f"{ra},{rd}": round(float(ca[ra, rd]), 6)
                                         for ra in range(ca.shape[0]) for rd in range(ca.shape[1])}
        return out

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def certify_grid(tallies: VoteTally, cfg: SparseNoiseConfig, alpha: float, n_classes: int,
                 max_ra: int, max_rd: int, labels=None, nodes=None) -> CertificateGrid:
    """Certify every node at every budget up to ``(max_ra, max_rd)``.

    Bounds are computed once per node and one region table per budget.  A
    budget row is abandoned as soon as no node certifies, which is sound
    because the margin only shrinks as either budget grows.
    """
    counts = np.atleast_2d(tallies.counts)
    n = counts.shape[0]
    tally = VoteTally(counts, tallies.n_total)
    abstain = abstain_test(tally, alpha)
    b = clopper_pearson_bounds(tally, alpha, n_classes)
    p_a, p_b = _clamp_bounds(b.p_a_lower, b.p_b_upper)
    status = np.full((n, max_ra + 1, max_rd + 1), NOT_CERTIFIED, dtype=np.int8)
    live = ~abstain
    for ra in range(max_ra + 1):
        alive = live.copy()
        for rd in range(max_rd + 1):
            if not alive.any():
                break
            table = identity_table() if ra == rd == 0 else region_table(cfg, ra, rd)
            mu = _Greedy(table).margin(p_a[alive], p_b[alive])
            ok = np.zeros(n, dtype=bool)
            ok[alive] = mu > 0
            status[ok, ra, rd] = CERTIFIED
            alive &= ok
    # monotone margins make the grid downward closed; enforce it against rounding
    cert = status == CERTIFIED
    closed = np.logical_and.accumulate(np.logical_and.accumulate(cert, axis=1), axis=2)
    if np.any(closed != cert):
        log.warning("downward closure enforced on %d grid cells", int((closed != cert).sum()))
    status = np.where(closed, CERTIFIED, NOT_CERTIFIED).astype(np.int8)
    status[abstain] = ABSTAIN
    nodes = np.arange(n) if nodes is None else np.asarray(nodes)
    return CertificateGrid(nodes, status, b.y_a, None if labels is None else np.asarray(labels))


# ---------------------------------------------------------------------------
# Gaussian and hash-partition certificates

def gaussian_radius(bounds: ProbabilityBounds, sigma: float) -> np.ndarray:
    """sigma / 2 * (Phi^-1(p_a_lower) - Phi^-1(p_b_upper)), floored at 0."""
    pa = np.asarray(bounds.p_a_lower, dtype=np.float64)
    pb = np.asarray(bounds.p_b_upper, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        r = 0.5 * sigma * (norm.ppf(pa) - norm.ppf(pb))
    r = np.where(pa > pb, r, 0.0)
    return np.where(np.isnan(r) | (r < 0), 0.0, r)


def cohen_radius(classes: np.ndarray, n_classes: int, alpha: float, sigma: float):
    """Radius of plain (unfiltered) Gaussian smoothing from raw per-sample classes.

    ``classes`` is (samples x points).  Returns ``(radius, abstain)``.
    """
    tally = count_votes(classes, n_classes)
    return gaussian_radius(clopper_pearson_bounds(tally, alpha, n_classes), sigma), \
        abstain_test(tally, alpha)


def gnncert_certify(tally: VoteTally) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class and certified edge budget m from partition votes.

    m = min over y != y_A of floor((c_A - c_y - [y < y_A]) / 2), floored at 0.
    """
    counts = np.atleast_2d(np.asarray(tally.counts, dtype=np.int64))
    y_a = np.argmax(counts, axis=1)
    c_a = counts[np.arange(counts.shape[0]), y_a]
    cls = np.arange(counts.shape[1])
    gap = c_a[:, None] - counts - (cls[None, :] < y_a[:, None])
    gap[np.arange(counts.shape[0]), y_a] = np.iinfo(np.int64).max
    m = np.maximum(np.floor_divide(gap.min(axis=1), 2), 0)
    if counts.shape[1] == 1:
        m = np.full(counts.shape[0], np.iinfo(np.int64).max)
    return y_a, m
