import numpy as np
import pytest

from auditvotes import pipeline as pl
from auditvotes.classifiers import GcnParams, gcn_forward, save_params
from auditvotes.config import ConfigError, ExperimentConfig
from auditvotes.smoothing import SparseNoiseConfig
from auditvotes.voting import FilterConfig

SMALL = {"data.sbm_nodes_per_class": 60, "split.per_class_labeled": 15, "train.max_epochs": 60,
         "train.hidden": 16, "train.learning_rate": 0.01, "certify.n_samples": 200,
         "certify.max_ra": 3, "certify.max_rd": 3, "certify.max_m": 3}


def small(tmp_path=None, **sets) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for k, v in {**SMALL, **sets}.items():
        cfg = cfg.set(k, v)
    if tmp_path is not None:
        cfg = cfg.set("run.output_dir", tmp_path)
    return cfg


@pytest.fixture(scope="module")
def prepared():
    return pl.prepare(small(), pl.StageTimer(), "sparse")


@pytest.fixture(scope="module")
def default_report(prepared):
    return pl.run_randomized_pipeline(small(), write=False, prepared=prepared)


def _base_accuracy(prep):
    pred = gcn_forward(prep.g, prep.params).class_index[prep.test_nodes]
    return float(np.mean(pred == prep.g.labels[prep.test_nodes]))


# ---------------------------------------------------------------------------
# randomized pipeline

def test_single_sample_without_noise_abstains(prepared):
    cfg = small(**{"certify.n_samples": 1, "smoothing.p_plus": 0.0, "smoothing.p_minus": 0.0})
    r = pl.run_randomized_pipeline(cfg, write=False, prepared=prepared)
    assert r.clean_accuracy == _base_accuracy(prepared)
    assert r.abstain_rate == 1.0
    assert all(v == 0.0 for v in r.certified_accuracy.values())


def test_rerun_gives_identical_files(tmp_path):
    for name in ("a", "b"):
        pl.run_randomized_pipeline(small(tmp_path / name), stats_samples=2)
    for f in ("grid.csv", "tallies.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "report.json").exists()


def test_thread_count_does_not_change_tallies(prepared):
    one = pl.run_randomized_pipeline(small(), write=False, prepared=prepared, stats_samples=0)
    three = pl.run_randomized_pipeline(small(**{"run.threads": 3}), write=False,
                                       prepared=prepared, stats_samples=0)
    assert np.array_equal(one.tally.counts, three.tally.counts)
    assert np.array_equal(one.grid.status, three.grid.status)


def test_certified_never_exceeds_clean(default_report):
    ca = np.array(list(default_report.certified_accuracy.values()))
    assert np.all(ca <= default_report.clean_accuracy)
    grid = default_report.grid.certified_accuracy()
    assert np.all(np.diff(grid, axis=0) <= 0) and np.all(np.diff(grid, axis=1) <= 0)


def test_stage_timings_cover_wall_clock():
    r = pl.run_randomized_pipeline(small(), write=False, stats_samples=2)
    assert sum(r.timings.values()) == pytest.approx(r.total_seconds, rel=0.05)


def test_report_rounds_only_when_serialized(default_report):
    d = default_report.to_dict()
    assert d["clean_accuracy"] == round(default_report.clean_accuracy, 6)
    assert isinstance(default_report.clean_accuracy, float)


def test_augmenter_does_not_shift_noise_stream():
    a, b = small(), small(**{"augment.kind": "jaccard"})
    assert pl.stream_seed(a.run.seed, "noise") == pl.stream_seed(b.run.seed, "noise")
    assert len(set(pl.STREAMS.values())) == len(pl.STREAMS)


def test_mismatched_checkpoint_fails_before_sampling(tmp_path):
    rng = np.random.default_rng(0)
    bad = GcnParams(rng.standard_normal((7, 4)), rng.standard_normal((4, 3)))
    save_params(tmp_path / "m.npz", bad)
    cfg = small(tmp_path, **{"train.checkpoint": tmp_path / "m.npz"})
    with pytest.raises(ConfigError, match="do not match"):
        pl.run_randomized_pipeline(cfg)
    assert not (tmp_path / "tallies.csv").exists()


def test_sim_conf_beats_plain_at_addition_budget_20():
    # desk-scale SBM with the default experiment settings, N = 2000
    base = ExperimentConfig()
    for k, v in {"certify.n_samples": 2000, "certify.max_ra": 20, "certify.max_rd": 0,
                 "train.max_epochs": 200}.items():
        base = base.set(k, v)
    plain = pl.run_randomized_pipeline(base, write=False, stats_samples=0)
    aug = pl.run_randomized_pipeline(
        base.set("augment.kind", "sim").set("filter.kind", "confidence").set("filter.theta", 0.5),
        write=False, stats_samples=0)
    assert aug.certified_accuracy["20,0"] > plain.certified_accuracy["20,0"]


# ---------------------------------------------------------------------------
# partition voting

def test_single_partition_certifies_nothing_beyond_zero():
    cfg = small(**{"smoothing.t_s": 1})
    r = pl.run_gnncert_pipeline(cfg, write=False)
    prep = pl.prepare(cfg, pl.StageTimer(), "partition")
    assert r.certified_accuracy["0"] == pytest.approx(_base_accuracy(prep), abs=1e-12)
    assert all(r.certified_accuracy[str(m)] == 0.0 for m in range(1, 4))


def test_partition_accuracy_monotone_in_budget(tmp_path):
    r = pl.run_gnncert_pipeline(small(tmp_path, **{"smoothing.t_s": 12}))
    ca = [r.certified_accuracy[str(m)] for m in range(4)]
    assert ca == sorted(ca, reverse=True) and ca[0] <= r.clean_accuracy
    lines = (tmp_path / "budgets.csv").read_text().splitlines()
    assert lines[0] == "node,prediction,budget" and len(lines) == r.extra["n_test"] + 1


def test_partition_sim_not_worse_than_plain():
    base = ExperimentConfig().set("smoothing.t_s", 12).set("train.max_epochs", 200)
    plain = pl.run_gnncert_pipeline(base, write=False)
    aug = pl.run_gnncert_pipeline(base.set("augment.kind", "sim"), write=False)
    assert aug.clean_accuracy >= plain.clean_accuracy


# ---------------------------------------------------------------------------
# Gaussian pipeline

GAUSS = {"gaussian.points_per_class": 150, "gaussian.test_points": 60, "certify.n_samples": 1000,
         "train.max_epochs": 200, "train.learning_rate": 0.01}


def test_gaussian_theta_zero_matches_unconditioned():
    cfg = small(**GAUSS)
    conf0 = pl.run_gaussian_pipeline(cfg.set("filter.kind", "confidence").set("filter.theta", 0.0),
                                     write=False)
    none = pl.run_gaussian_pipeline(cfg, write=False)
    assert np.array_equal(conf0.tally.counts, conf0.reference_tally.counts)
    assert np.array_equal(conf0.tally.counts, none.tally.counts)
    assert np.array_equal(conf0.extra["radius"], none.extra["radius"])


def test_gaussian_radius_zero_dominates():
    r = pl.run_gaussian_pipeline(small(**GAUSS), write=False)
    ca = r.certified_accuracy
    assert all(ca["0"] >= v for v in ca.values())
    assert ca["0"] <= r.clean_accuracy


def test_gaussian_confidence_filter_does_not_shrink_radius():
    cfg = small(**GAUSS).set("filter.kind", "confidence")
    lo = pl.run_gaussian_pipeline(cfg.set("filter.theta", 0.0), write=False)
    hi = pl.run_gaussian_pipeline(cfg.set("filter.theta", 0.9), write=False)
    assert hi.extra["mean_certified_radius"] >= lo.extra["mean_certified_radius"]


def test_blobs_shape_and_centers():
    x, y = pl.generate_blobs(500, 3, 2, 2.0, 0.1, seed=0)
    assert x.shape == (1000, 3) and np.bincount(y).tolist() == [500, 500]
    assert x[y == 0, 0].mean() == pytest.approx(-1.0, abs=0.02)
    with pytest.raises(ValueError):
        pl.generate_blobs(5, 2, 3, 1.0, 0.1, seed=0)


# ---------------------------------------------------------------------------
# empirical evaluation

def test_zero_budget_attack_changes_nothing(prepared):
    targets = prepared.test_nodes[:10]
    r = pl.run_empirical_eval(small(), 0, targets, write=False, prepared=prepared)
    assert r.extra["accuracy_before"] == r.extra["accuracy_after"]
    assert np.array_equal(r.extra["prediction_before"], r.extra["prediction_after"])


def test_target_outside_test_set_rejected(prepared):
    outside = np.setdiff1d(np.arange(prepared.g.n), prepared.test_nodes)[:1]
    with pytest.raises(ValueError, match="outside the test set"):
        pl.run_empirical_eval(small(), 1, outside, write=False, prepared=prepared)


def test_saturating_attack_is_deterministic(prepared):
    g = prepared.g
    t = int(prepared.test_nodes[0])
    a = pl.random_flip_attack(g, t, g.n ** 2, np.random.default_rng(0))
    b = pl.random_flip_attack(g, t, g.n ** 2, np.random.default_rng(1))
    assert np.array_equal(a.keys, b.keys)
    before = set(g.adjacency[t].indices.tolist()) - {t}
    after = set(a.adjacency[t].indices.tolist()) - {t}
    assert after == set(range(g.n)) - before - {t}


def test_certified_nodes_survive_random_attacks(prepared, default_report):
    # every attack flips b pairs, so it stays within (b, b)
    b = 2
    grid = default_report.grid
    ok = (grid.status[:, b, b] == 1) & grid.correct
    nodes = grid.nodes[ok]
    assert nodes.size > 0
    cfg = small()
    noise = SparseNoiseConfig(cfg.smoothing.p_plus, cfg.smoothing.p_minus,
                              pl.stream_seed(cfg.run.seed, "noise"))
    rng = np.random.default_rng(99)
    for k in range(100):
        t = int(nodes[k % nodes.size])
        ga = pl.random_flip_attack(prepared.g, t, int(rng.integers(1, b + 1)), rng)
        tl = pl.smooth_votes(ga, prepared.params, noise, FilterConfig(), 200, np.array([t]))
        assert int(np.argmax(tl.counts[0])) == prepared.g.labels[t]
