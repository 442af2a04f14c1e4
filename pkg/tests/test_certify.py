import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.stats import norm

from auditvotes.certify import (ABSTAIN, CERTIFIED, NOT_CERTIFIED, certify_grid, certify_node,
                                exact_margin_oracle, gaussian_radius, gnncert_certify, identity_table,
                                margins, region_table, worst_case_margin)
from auditvotes.smoothing import SparseNoiseConfig
from auditvotes.voting import ProbabilityBounds, VoteTally

import oracles

probs = st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


def _bounds(pa, pb):
    return ProbabilityBounds(np.float64(pa), np.float64(pb), 0.001)


# ---------------------------------------------------------------------------
# region tables

def test_region_example():
    t = region_table(SparseNoiseConfig(0.2, 0.4), 1, 1)
    assert np.allclose(t.r, [0.48, 0.44, 0.08], atol=1e-15)
    assert np.allclose(t.ratios, [6.0, 1.0, 1 / 6], rtol=1e-14)
    assert np.allclose(t.r, t.ratios * t.r_prime, rtol=1e-12)


@given(probs, probs, st.integers(0, 50), st.integers(0, 50))
def test_region_masses_and_ratio_identity(pp, pm, ra, rd):
    assume(ra + rd >= 1)
    t = region_table(SparseNoiseConfig(pp, pm), ra, rd)
    assert abs(t.r.sum() - 1) < 1e-10 and abs(t.r_prime.sum() - 1) < 1e-10
    ok = t.r_prime > 1e-300
    assert np.allclose(t.r[ok], t.ratios[ok] * t.r_prime[ok], rtol=1e-9, atol=1e-300)
    assert np.all(np.diff(t.log_ratios) < 0)
    if abs(pp + pm - 1) > 1e-9:
        assert len(t) == ra + rd + 1 or t.r.min() == 0


@given(probs, probs, st.integers(0, 6), st.integers(0, 6))
def test_region_masses_match_enumeration(pp, pm, ra, rd):
    assume(1 <= ra + rd <= 12)
    t = region_table(SparseNoiseConfig(pp, pm), ra, rd)
    r, rp = oracles.region_masses(pp, pm, ra, rd)
    # tables are sorted by decreasing likelihood ratio
    if len(t) == ra + rd + 1:
        order = np.argsort(-(np.log(r) - np.log(rp)), kind="stable")
        assert np.allclose(t.r, r[order], atol=1e-10)
        assert np.allclose(t.r_prime, rp[order], atol=1e-10)


def test_complementary_noise_single_region():
    t = region_table(SparseNoiseConfig(0.3, 0.7), 3, 2)
    assert len(t) == 1
    assert t.r[0] == pytest.approx(1.0) and t.log_ratios[0] == pytest.approx(0.0, abs=1e-12)
    assert margins(t, 0.8, 0.15) == pytest.approx(0.65)


@pytest.mark.parametrize("pp,pm", [(0.0, 0.3), (0.2, 0.0), (0.0, 0.5), (1.0, 0.2), (0.4, 1.0),
                                   (0.3, 0.7), (0.0, 0.9)])
def test_degenerate_noise_matches_pattern_lp(pp, pm):
    # zero or one flip probabilities make some index regions one-sided
    for ra in range(4):
        for rd in range(4):
            if ra + rd == 0:
                continue
            t = region_table(SparseNoiseConfig(pp, pm), ra, rd)
            assert abs(t.r.sum() - 1) < 1e-12 and abs(t.r_prime.sum() - 1) < 1e-12
            assert np.all(np.diff(t.log_ratios) < 0)
            for pa, pb in ((0.9, 0.05), (0.6, 0.3), (0.99, 0.0)):
                exact = oracles.pattern_margin(pp, pm, ra, rd, pa, pb)
                assert abs(float(margins(t, pa, pb)) - float(exact)) < 1e-12


def test_one_sided_region_not_merged_with_finite_ratio():
    t = region_table(SparseNoiseConfig(0.0, 0.3), 2, 1)
    assert np.isinf(t.log_ratios[0]) and np.isfinite(t.log_ratios[1])
    assert t.r[1] == pytest.approx(0.3) and t.r_prime[1] == pytest.approx(0.09)


def test_region_table_rejects_degenerate():
    with pytest.raises(ValueError):
        region_table(SparseNoiseConfig(0.0, 1.0), 1, 1)
    with pytest.raises(ValueError):
        region_table(SparseNoiseConfig(0.2, 0.2), -1, 1)


# ---------------------------------------------------------------------------
# margins

def test_zero_budget_margin():
    assert worst_case_margin(identity_table(), _bounds(0.7, 0.2)).mu == pytest.approx(0.5)


def test_certain_classifier_margin():
    r = worst_case_margin(region_table(SparseNoiseConfig(0.2, 0.4), 1, 0), _bounds(1.0, 0.0))
    assert r.mu == pytest.approx(1.0) and r.certified


def test_oracle_trivial_cases():
    t = region_table(SparseNoiseConfig(0.2, 0.4), 2, 1)
    assert exact_margin_oracle(t, _bounds(0.0, 0.0)) == 0.0
    assert exact_margin_oracle(identity_table(), _bounds(0.6, 0.3)) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        exact_margin_oracle(t, _bounds(0.7, 0.4))


def test_margin_matches_rational_lp():
    rng = np.random.default_rng(3)
    grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    for _ in range(50):
        pp, pm = (float(rng.choice(grid)) for _ in range(2))
        ra, rd = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        if ra + rd == 0 or pp + pm == 1.0:
            continue
        pa = float(rng.uniform(0.3, 1.0))
        pb = float(rng.uniform(0.0, 1.0 - pa))
        t = region_table(SparseNoiseConfig(pp, pm), ra, rd)
        got = worst_case_margin(t, _bounds(pa, pb)).mu
        exact = oracles.exact_margin(Fraction(pp), Fraction(pm), ra, rd, Fraction(pa), Fraction(pb))
        assert abs(got - float(exact)) < 1e-9
        if len(t) <= 8:
            assert abs(got - exact_margin_oracle(t, _bounds(pa, pb), method="vertices")) < 1e-9


def test_margin_clamps_with_warning():
    t = region_table(SparseNoiseConfig(0.2, 0.4), 1, 1)
    with pytest.warns(UserWarning):
        mu = worst_case_margin(t, _bounds(0.7, 0.5)).mu
    assert mu == pytest.approx(worst_case_margin(t, _bounds(0.7, 0.3)).mu)


@given(probs, probs, st.integers(0, 8), st.integers(0, 8), st.floats(0.5, 1.0), st.floats(0.0, 0.5))
def test_margin_monotone(pp, pm, ra, rd, pa, pb):
    assume(pa + pb <= 1)
    cfg = SparseNoiseConfig(pp, pm)

    def mu(a, d, x=pa, y=pb):
        t = identity_table() if a == d == 0 else region_table(cfg, a, d)
        return float(margins(t, x, y))

    base = mu(ra, rd)
    assert -1 <= base <= 1
    assert mu(ra + 1, rd) <= base + 1e-12
    assert mu(ra, rd + 1) <= base + 1e-12
    assert mu(ra, rd, x=min(1 - pb, pa + 0.01)) >= base - 1e-12
    assert mu(ra, rd, y=max(0.0, pb - 0.01)) >= base - 1e-12


def test_conditional_margin_assumes_filter_independent_of_perturbation():
    # One deleted edge, p_plus = p_minus = 0.1.  Z is the noisy presence of that
    # edge: P(Z=1) = 0.9 on the clean graph and 0.1 on the perturbed one.  The
    # classifier votes A iff Z=1; a filter that keeps Z=1 always and Z=0 with
    # probability 0.137 makes the clean conditional vote look overwhelming, the
    # margin is positive, yet the perturbed conditional vote prefers B.
    keep0 = 0.137

    def p_a(pz1):
        return pz1 / (pz1 + keep0 * (1 - pz1))

    clean, perturbed = p_a(0.9), p_a(0.1)
    t = region_table(SparseNoiseConfig(0.1, 0.1), 0, 1)
    mu = worst_case_margin(t, _bounds(clean, 1 - clean)).mu
    assert mu > 0.7
    assert perturbed < 0.5
    # without a filter the same classifier is correctly left uncertified
    assert worst_case_margin(t, _bounds(0.9, 0.1)).mu <= 0


# ---------------------------------------------------------------------------
# per-node and grid certification

def test_certify_node_examples():
    cfg = SparseNoiseConfig(0.01, 0.6)
    assert certify_node(VoteTally(np.array([10_000, 0]), 10_000), cfg, 0.001, 2, (0, 0)) == (CERTIFIED, 0)
    assert certify_node(VoteTally(np.array([0, 0, 0]), 100), cfg, 0.001, 3, (1, 1))[0] == ABSTAIN
    assert certify_node(VoteTally(np.array([52, 48]), 100), cfg, 0.001, 2, (0, 0))[0] == ABSTAIN


def test_grid_matches_node_by_node(rng):
    cfg = SparseNoiseConfig(0.01, 0.6)
    counts = np.c_[rng.integers(0, 1000, 40), rng.integers(0, 60, 40), rng.integers(0, 60, 40)]
    tally = VoteTally(counts, 1000)
    grid = certify_grid(tally, cfg, 0.01, 3, 2, 6)
    for i in range(40):
        for ra in range(3):
            for rd in range(7):
                status, y = certify_node(tally.node(i), cfg, 0.01, 3, (ra, rd))
                assert grid.status[i, ra, rd] == status
                assert grid.prediction[i] == y


def test_zero_budget_grid_is_clean_classification():
    tally = VoteTally(np.array([[990, 10], [5, 995], [500, 500], [0, 0]]), 1000)
    grid = certify_grid(tally, SparseNoiseConfig(0.1, 0.1), 0.001, 2, 0, 0, labels=[0, 0, 0, 1])
    assert grid.status[:, 0, 0].tolist() == [CERTIFIED, CERTIFIED, ABSTAIN, ABSTAIN]
    assert grid.correct.tolist() == [True, False, True, False]
    assert grid.certified_accuracy()[0, 0] == 0.25
    assert grid.abstain_rate() == 0.5


@given(st.integers(0, 2 ** 31))
def test_grid_downward_closed_and_curve_monotone(seed):
    rng = np.random.default_rng(seed)
    counts = np.c_[rng.integers(800, 2000, 25), rng.integers(0, 100, 25)]
    grid = certify_grid(VoteTally(counts, 2000), SparseNoiseConfig(0.05, 0.5), 0.001, 2, 3, 20,
                        labels=np.zeros(25, int))
    cert = grid.status == CERTIFIED
    assert np.all(cert[:, 1:, :] <= cert[:, :-1, :])
    assert np.all(cert[:, :, 1:] <= cert[:, :, :-1])
    curve = grid.certified_accuracy()[0, [0, 5, 10, 20]]
    assert np.all(np.diff(curve) <= 0)


def test_grid_exports(tmp_path):
    tally = VoteTally(np.array([[990, 10], [400, 600]]), 1000)
    grid = certify_grid(tally, SparseNoiseConfig(0.1, 0.3), 0.001, 2, 1, 1, labels=[0, 1], nodes=[7, 9])
    grid.write_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "node,ra,rd,status" and len(lines) == 1 + 2 * 4
    assert lines[1].startswith("7,0,0,")
    grid.write_json(tmp_path / "g.json")
    doc = json.loads((tmp_path / "g.json").read_text())
    assert set(doc["certified_accuracy"]) == {"0,0", "0,1", "1,0", "1,1"}
    assert doc["nodes"] == 2


# ---------------------------------------------------------------------------
# Gaussian radius

def test_gaussian_radius_examples():
    assert gaussian_radius(_bounds(0.3, 0.3), 1.0) == 0.0
    r = gaussian_radius(_bounds(norm.cdf(1.0), norm.cdf(-1.0)), 1.0)
    assert r == pytest.approx(1.0, abs=1e-12)
    assert round(norm.cdf(1.0), 5) == 0.84134
    assert gaussian_radius(_bounds(0.2, 0.7), 1.0) == 0.0


@given(st.floats(0.51, 0.999), st.floats(0.001, 0.49), st.floats(0.1, 5.0))
def test_gaussian_radius_monotone(pa, pb, sigma):
    r = float(gaussian_radius(_bounds(pa, pb), sigma))
    assert r > 0
    assert float(gaussian_radius(_bounds(pa, pb), sigma * 1.1)) > r
    assert float(gaussian_radius(_bounds(min(pa + 1e-3, 0.9999), pb), sigma)) > r
    expect = sigma / 2 * (norm.ppf(pa) - norm.ppf(pb))
    assert r == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------------------
# partition votes

@pytest.mark.parametrize("counts,y,m", [([10, 4], 0, 3), ([5, 5], 0, 0), ([6, 5], 0, 0),
                                        ([4, 10], 1, 2), ([0, 3, 3, 1], 1, 0), ([2, 9, 1], 1, 3)])
def test_gnncert_examples(counts, y, m):
    ya, mm = gnncert_certify(VoteTally(np.array(counts), sum(counts)))
    assert (int(ya[0]), int(mm[0])) == (y, m)
    assert int(mm[0]) == oracles.largest_surviving_budget(tuple(counts))


def test_gnncert_examples_exhaustive():
    assert oracles.largest_surviving_budget((10, 4)) == 3
    assert oracles.largest_surviving_budget((6, 5)) == 0


@given(st.lists(st.integers(0, 6), min_size=2, max_size=4))
def test_gnncert_never_overstates(counts):
    assume(sum(counts) > 0)
    _, m = gnncert_certify(VoteTally(np.array(counts), sum(counts)))
    y = oracles.argmax_first(counts)
    assert all(oracles.argmax_first(c) == y for c in oracles.reachable(tuple(counts), int(m[0])))


def test_gnncert_single_class_unbounded():
    _, m = gnncert_certify(VoteTally(np.array([[4]]), 4))
    assert m[0] > 10 ** 12


def test_status_constants_distinct():
    assert len({CERTIFIED, NOT_CERTIFIED, ABSTAIN}) == 3
    assert math.isfinite(float(margins(identity_table(), 0.6, 0.4)))
