"""End-to-end runs: sample, rewire, classify, filter, tally, certify, report."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from .certify import (CertificateGrid, certify_grid, gaussian_radius,
                      gnncert_certify)
from .classifiers import (GcnParams, MlpParams, TrainConfig, gcn_forward, load_params,
                          mlp_forward, train_classifier, train_mlp)
from .config import ConfigError, ExperimentConfig
from .graph import (SparseGraph, default_id_map, edge_sparsity, generate_sbm, load_dataset,
                    make_inductive_split, node_homophily, read_id_map, read_split,
                    reconstruction_auc, pair_keys)
from .smoothing import (GaussianNoiseConfig, PartitionConfig, SparseNoiseConfig, hash_partition,
                        mix_seed, sample_sparse_noise, stream_rng)
from .voting import (FilterConfig, VoteAccumulator, VoteTally, abstain_test,
                     clopper_pearson_bounds, filter_pass, write_tallies)

log = logging.getLogger(__name__)

STREAMS = {"data": 1, "split": 2, "init": 3, "noise": 4, "attack": 5, "augment": 6,
           "train_noise": 7}


def stream_seed(root: int, name: str) -> int:
    """Independent child seed per named stream, so toggling one stage never
    shifts the random draws of another."""
    return mix_seed(root, STREAMS[name])


# ---------------------------------------------------------------------------
# reporting

class StageTimer:
    def __init__(self):
        self.t0 = time.perf_counter()
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t

    def total(self) -> float:
        return time.perf_counter() - self.t0


def _rounded(x):
    if isinstance(x, dict):
        return {str(k): _rounded(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_rounded(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return round(float(x), 6)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _rounded(x.tolist())
    return x


@dataclass
class Report:
    scheme: str
    clean_accuracy: float
    abstain_rate: float
    certified_accuracy: dict
    graph_stats: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    extra: dict = field(default_factory=dict)
    # in-memory results, not serialized
    grid: CertificateGrid | None = field(default=None, repr=False)
    tally: VoteTally | None = field(default=None, repr=False)
    nodes: np.ndarray | None = field(default=None, repr=False)
    reference_tally: VoteTally | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return _rounded({
            "scheme": self.scheme,
            "clean_accuracy": self.clean_accuracy,
            "abstain_rate": self.abstain_rate,
            "certified_accuracy": self.certified_accuracy,
            "graph_stats": self.graph_stats,
            "timings": self.timings,
            "total_seconds": self.total_seconds,
            "extra": self.extra,
        })

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# preparation shared by the graph pipelines

class Rewirer:
    """Rewiring with per-graph score matrices, dispatched on node count."""

    def __init__(self):
        self.by_n: dict[int, tuple[aug.EdgeScoreMatrix, aug.ThresholdPair]] = {}

    def add(self, scores: aug.EdgeScoreMatrix, thresholds: aug.ThresholdPair) -> None:
        self.by_n[scores.n] = (scores, thresholds)

    def __call__(self, g: SparseGraph) -> SparseGraph:
        try:
            scores, th = self.by_n[g.n]
        except KeyError:
            raise ValueError(f"no score matrix for a graph with {g.n} nodes") from None
        return aug.rewire(g, scores, th)


@dataclass
class Prepared:
    g: SparseGraph
    split: object
    id_map: dict
    params: GcnParams
    augmenter: aug.AugmenterParams | None
    rewirer: Rewirer | None
    scores: aug.EdgeScoreMatrix | None  # on the full (test) graph
    e_ratio: float

    @property
    def test_nodes(self) -> np.ndarray:
        return self.split.test

    @property
    def n_classes(self) -> int:
        return self.g.num_classes


def load_graph(cfg: ExperimentConfig) -> tuple[SparseGraph, dict]:
    d = cfg.data
    if d.edges:
        id_map = read_id_map(d.id_map) if d.id_map else None
        g = load_dataset(d.edges, d.features, d.labels or None, id_map, binarize=d.binarize)
        if g.labels is None or np.any(g.labels < 0):
            raise ConfigError("every node needs a label")
        return g, id_map or default_id_map(g.n)
    g = generate_sbm(d.sbm_classes, d.sbm_nodes_per_class, d.sbm_p_in, d.sbm_p_out,
                     d.sbm_feature_dim, d.sbm_feature_signal, stream_seed(cfg.run.seed, "data"))
    return g, default_id_map(g.n)


def _score_graph(cfg, g, augmenter):
    a = cfg.augment
    if a.cache_dir:
        return aug.cached_scores(a.cache_dir, g, a.kind, augmenter, a.candidate_k, a.dense_limit,
                                 cfg.data.binarize)
    return aug.edge_scores(g, a.kind, augmenter, a.candidate_k, a.dense_limit, cfg.data.binarize)


def _thresholds(cfg, scores, e_ratio, n_test, scheme):
    s = cfg.smoothing
    if scheme == "partition":
        return aug.gnncert_threshold(scores, e_ratio, n_test, s.t_s, cfg.augment.population)
    noise = SparseNoiseConfig(s.p_plus, s.p_minus)
    return aug.noise_adaptive_thresholds(scores, e_ratio, n_test, noise, cfg.augment.population)


def prepare(cfg: ExperimentConfig, timer: StageTimer, scheme: str) -> Prepared:
    root = cfg.run.seed
    with timer.stage("data"):
        g, id_map = load_graph(cfg)
        if cfg.split.split_file:
            split = read_split(cfg.split.split_file)
            if split.n != g.n:
                raise ConfigError(f"split file covers {split.n} nodes, graph has {g.n}")
        else:
            split = make_inductive_split(g, cfg.split.per_class_labeled, cfg.split.test_fraction,
                                         stream_seed(root, "split"))
        g_train = g.subgraph(split.train_nodes)
        g_val = g.subgraph(split.val_graph_nodes)
        e_ratio = edge_sparsity(g_train)

    augmenter = rewirer = scores = None
    a = cfg.augment
    if a.kind != "none":
        with timer.stage("augment_train"):
            if a.kind in ("fae", "sim"):
                if a.checkpoint and Path(a.checkpoint).exists():
                    augmenter = aug.load_augmenter(a.checkpoint)
                    if augmenter.kind != a.kind:
                        raise ConfigError(f"augmenter checkpoint is {augmenter.kind}, config says {a.kind}")
                else:
                    tcfg = TrainConfig(learning_rate=a.learning_rate, weight_decay=0.0,
                                       max_epochs=a.epochs, patience=a.epochs,
                                       seed=stream_seed(root, "augment"))
                    augmenter = aug.train_augmenter(g_train, a.kind, tcfg, a.hidden, a.embed,
                                                    a.heads, cfg.data.binarize).params
        with timer.stage("augment_scores"):
            rewirer = Rewirer()
            for graph in (g_train, g_val, g):
                sc = _score_graph(cfg, graph, augmenter)
                rewirer.add(sc, _thresholds(cfg, sc, e_ratio, graph.n, scheme))
            scores = rewirer.by_n[g.n][0]

    c = g.num_classes
    with timer.stage("train"):
        t = cfg.train
        if t.checkpoint and Path(t.checkpoint).exists():
            params, _ = load_params(t.checkpoint)
            if not isinstance(params, GcnParams):
                raise ConfigError("classifier checkpoint does not hold GCN parameters")
            if params.w1.shape[0] != g.num_features or params.w2.shape[1] != c:
                raise ConfigError(f"checkpoint shapes {params.w1.shape}/{params.w2.shape} do not "
                                  f"match {g.num_features} features / {c} classes")
        else:
            params = _train_gcn(cfg, g, split, rewirer, scheme, id_map)
    return Prepared(g, split, id_map, params, augmenter, rewirer, scores, e_ratio)


def _train_gcn(cfg, g, split, rewirer, scheme, id_map):
    t, s = cfg.train, cfg.smoothing
    root = cfg.run.seed
    tcfg = TrainConfig(t.learning_rate, t.weight_decay, t.max_epochs, min(t.patience, t.max_epochs),
                       None, stream_seed(root, "init"), t.hidden)
    if t.noise_training and scheme == "sparse" and (s.p_plus > 0 or s.p_minus > 0):
        noise = SparseNoiseConfig(s.p_plus, s.p_minus, stream_seed(root, "train_noise"))

        def sampler(graph, index):
            z = sample_sparse_noise(graph, noise, index)
            return rewirer(z) if rewirer is not None else z
    elif t.noise_training and scheme == "partition" and s.t_s > 1:
        pcfg = PartitionConfig(s.t_s)
        cache: dict[int, list] = {}

        def sampler(graph, index):
            if graph.n not in cache:
                cache[graph.n] = hash_partition(graph, pcfg)
            z = cache[graph.n][index % s.t_s]
            return rewirer(z) if rewirer is not None else z
    else:
        sampler = None
    return train_classifier(g, split, tcfg, sampler=sampler)


# ---------------------------------------------------------------------------
# the sampling loop

def smooth_votes(g: SparseGraph, params: GcnParams, noise: SparseNoiseConfig, fcfg: FilterConfig,
                 n_samples: int, nodes: np.ndarray, rewirer=None, threads: int = 1,
                 start: int = 0) -> VoteTally:
    """Filtered votes of the GCN over ``n_samples`` noisy (optionally rewired) graphs.

    Workers own private accumulators over disjoint index ranges; counts add,
    so the result does not depend on ``threads``.
    """
    xw1 = np.asarray(g.features @ params.w1)
    c = params.w2.shape[1]

    def work(lo, hi):
        acc = VoteAccumulator(len(nodes), c, fcfg)
        for i in range(lo, hi):
            z = sample_sparse_noise(g, noise, i)
            if rewirer is not None:
                z = rewirer(z)
            acc.add(gcn_forward(z, params, xw1), z, nodes)
        return acc.tally()

    bounds = np.linspace(start, start + n_samples, max(1, threads) + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(chunks) == 1:
        return work(*chunks[0])
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(lambda ab: work(*ab), chunks))
    out = parts[0]
    for p in parts[1:]:
        out = out.merge(p)
    return out


def smooth_classes(g: SparseGraph, params: GcnParams, noise: SparseNoiseConfig, n_samples: int,
                   nodes: np.ndarray, rewirer=None) -> np.ndarray:
    """Raw (samples x nodes) predicted classes; the unfiltered reference path."""
    xw1 = np.asarray(g.features @ params.w1)
    out = np.empty((n_samples, len(nodes)), dtype=np.int64)
    for i in range(n_samples):
        z = sample_sparse_noise(g, noise, i)
        if rewirer is not None:
            z = rewirer(z)
        out[i] = gcn_forward(z, params, xw1).class_index[nodes]
    return out


def _structure_stats(g, noise, rewirer, scores, samples: int) -> dict:
    labels = g.labels
    out = {"clean": {"edge_sparsity": edge_sparsity(g),
                     "homophily_mean": float(node_homophily(g, labels).mean())}}
    hn, hr, en, er = [], [], [], []
    for i in range(samples):
        z = sample_sparse_noise(g, noise, i)
        hn.append(node_homophily(z, labels).mean())
        en.append(z.num_edges)
        if rewirer is not None:
            zr = rewirer(z)
            hr.append(node_homophily(zr, labels).mean())
            er.append(zr.num_edges)
    out["noisy"] = {"homophily_mean": float(np.mean(hn)), "edges": float(np.mean(en))}
    if rewirer is not None:
        out["rewired"] = {"homophily_mean": float(np.mean(hr)), "edges": float(np.mean(er))}
        out["clean"]["edges"] = g.num_edges
        out["reconstruction_auc"] = reconstruction_auc(g, scores)
    return out


def _finish(cfg, report: Report, timer: StageTimer, write: bool, extra_files=()) -> Report:
    if write:
        with timer.stage("write"):
            out = Path(cfg.run.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
            if report.grid is not None:
                report.grid.write_csv(out / "grid.csv")
            if report.tally is not None:
                write_tallies(out / "tallies.csv", report.tally, report.nodes)
            for name, writer in extra_files:
                writer(out / name)
    report.timings = dict(timer.stages)
    report.total_seconds = timer.total()
    if write:
        report.write(Path(cfg.run.output_dir) / "report.json")
    return report


def _grid_accuracy(grid: CertificateGrid) -> dict:
    ca = grid.certified_accuracy()
    return {f"{ra},{rd}": float(ca[ra, rd]) for ra in range(ca.shape[0]) for rd in range(ca.shape[1])}


def run_randomized_pipeline(cfg: ExperimentConfig, write: bool = True,
                            prepared: Prepared | None = None, stats_samples: int = 5) -> Report:
    timer = StageTimer()
    prep = prepared or prepare(cfg, timer, "sparse")
    s, c = cfg.smoothing, cfg.certify
    noise = SparseNoiseConfig(s.p_plus, s.p_minus, stream_seed(cfg.run.seed, "noise"))
    fcfg = FilterConfig(cfg.filter.kind, cfg.filter.theta)
    test = prep.test_nodes
    g = prep.g
    with timer.stage("sample"):
        tally = smooth_votes(g, prep.params, noise, fcfg, c.n_samples, test, prep.rewirer,
                             cfg.run.threads)
    with timer.stage("certify"):
        grid = certify_grid(tally, noise, c.alpha, prep.n_classes, c.max_ra, c.max_rd,
                            g.labels[test], test)
    with timer.stage("stats"):
        stats = _structure_stats(g, noise, prep.rewirer, prep.scores, min(stats_samples, c.n_samples)) \
            if stats_samples > 0 else {}
    report = Report("sparse", grid.clean_accuracy(), grid.abstain_rate(), _grid_accuracy(grid),
                    stats, extra={"n_test": int(test.size), "augmenter": cfg.augment.kind,
                                  "filter": fcfg.kind, "theta": fcfg.theta},
                    grid=grid, tally=tally, nodes=test)
    return _finish(cfg, report, timer, write)


def run_gnncert_pipeline(cfg: ExperimentConfig, write: bool = True,
                         prepared: Prepared | None = None) -> Report:
    timer = StageTimer()
    prep = prepared or prepare(cfg, timer, "partition")
    g, test = prep.g, prep.test_nodes
    pcfg = PartitionConfig(cfg.smoothing.t_s)
    with timer.stage("sample"):
        subgraphs = hash_partition(g, pcfg, prep.id_map)
        xw1 = np.asarray(g.features @ prep.params.w1)
        acc = VoteAccumulator(len(test), prep.n_classes, FilterConfig("none"))
        for sub in subgraphs:
            z = prep.rewirer(sub) if prep.rewirer is not None else sub
            acc.add(gcn_forward(z, prep.params, xw1), z, test)
        tally = acc.tally()
    with timer.stage("certify"):
        y_a, m = gnncert_certify(tally)
        correct = y_a == g.labels[test]
        max_m = cfg.certify.max_m
        cert = {str(b): float(np.mean(correct & (m >= b))) for b in range(max_m + 1)}
    report = Report("partition", float(np.mean(correct)), 0.0, cert,
                    extra={"t_s": pcfg.t_s, "augmenter": cfg.augment.kind, "n_test": int(test.size)},
                    tally=tally, nodes=test)

    def write_budgets(path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("node,prediction,budget\n")
            for node, y, b in zip(test, y_a, m):
                fh.write(f"{int(node)},{int(y)},{int(b)}\n")

    report.extra["budgets"] = m
    return _finish(cfg, report, timer, write, [("budgets.csv", write_budgets)])


# ---------------------------------------------------------------------------
# Gaussian pipeline on dense vectors

def generate_blobs(points_per_class: int, dim: int, classes: int, separation: float,
                   spread: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters; class k is centered at ``separation`` * e_k
    (two classes sit at -/+ separation / 2 on the first axis)."""
    if classes == 2:
        centers = np.zeros((2, dim))
        centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    else:
        if dim < classes:
            raise ValueError("need dim >= classes")
        centers = separation * np.eye(classes, dim)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), points_per_class)
    x = centers[y] + spread * rng.standard_normal((y.shape[0], dim))
    return x, y


def gaussian_tally(x: np.ndarray, params: MlpParams, noise: GaussianNoiseConfig, fcfg: FilterConfig,
                   n_samples: int, batch: int = 4096) -> tuple[VoteTally, VoteTally]:
    """Filtered and unfiltered vote tallies for every row of ``x`` from the same samples."""
    c = params.w2.shape[0]
    filt = np.zeros((x.shape[0], c), dtype=np.int64)
    raw = np.zeros((x.shape[0], c), dtype=np.int64)
    for j in range(x.shape[0]):
        rng = stream_rng(noise.seed, j)
        for lo in range(0, n_samples, batch):
            k = min(batch, n_samples - lo)
            xs = x[j] + noise.sigma * rng.standard_normal((k, x.shape[1]))
            pred = mlp_forward(xs, params)
            cls = pred.class_index
            passed = filter_pass(pred, None, fcfg) if fcfg.kind in ("none", "confidence") else None
            if passed is None:
                raise ValueError("vector inputs support the none and confidence filters only")
            filt[j] += np.bincount(cls[passed], minlength=c)
            raw[j] += np.bincount(cls, minlength=c)
    return VoteTally(filt, n_samples), VoteTally(raw, n_samples)


def run_gaussian_pipeline(cfg: ExperimentConfig, write: bool = True) -> Report:
    timer = StageTimer()
    gcfg, root = cfg.gaussian, cfg.run.seed
    sigma = cfg.smoothing.sigma
    with timer.stage("data"):
        x, y = generate_blobs(gcfg.points_per_class, gcfg.dim, gcfg.classes, gcfg.separation,
                              gcfg.spread, stream_seed(root, "data"))
        rng = np.random.default_rng(stream_seed(root, "split"))
        perm = rng.permutation(x.shape[0])
        n_test = min(gcfg.test_points, x.shape[0] // 2)
        te, tr = perm[:n_test], perm[n_test:]
    with timer.stage("train"):
        t = cfg.train
        tcfg = TrainConfig(t.learning_rate, t.weight_decay, t.max_epochs,
                           min(t.patience, t.max_epochs), None, stream_seed(root, "init"), t.hidden)
        params = train_mlp(x[tr], y[tr], tcfg, noise_sigma=sigma if t.noise_training else 0.0)
    noise = GaussianNoiseConfig(sigma, stream_seed(root, "noise"))
    fcfg = FilterConfig(cfg.filter.kind, cfg.filter.theta)
    c = cfg.certify
    with timer.stage("sample"):
        tally, raw = gaussian_tally(x[te], params, noise, fcfg, c.n_samples)
    with timer.stage("certify"):
        b = clopper_pearson_bounds(tally, c.alpha, gcfg.classes, c.bonferroni)
        radius = gaussian_radius(b, sigma)
        abstain = abstain_test(tally, c.alpha)
        correct = b.y_a == y[te]
        ok = correct & ~abstain & (radius > 0)
        radii = [float(r) for r in gcfg.radii.split(",")]
        cert = {f"{r:g}": float(np.mean(ok & (radius >= r))) for r in radii}
    report = Report("gaussian", float(np.mean(correct)), float(np.mean(abstain)), cert,
                    extra={"sigma": sigma, "theta": fcfg.theta, "filter": fcfg.kind,
                           "mean_certified_radius": float(radius[ok].mean()) if ok.any() else 0.0,
                           "radius": radius, "abstain": abstain, "correct": correct},
                    tally=tally, nodes=te, reference_tally=raw)
    return _finish(cfg, report, timer, write)


# ---------------------------------------------------------------------------
# empirical evaluation with a random-flip attacker

def random_flip_attack(g: SparseGraph, target: int, budget: int,
                       rng: np.random.Generator) -> SparseGraph:
    """Flip ``budget`` random node pairs incident to ``target`` (all of them if
    ``budget`` reaches n - 1)."""
    others = np.delete(np.arange(g.n), target)
    k = min(budget, others.shape[0])
    if k == 0:
        return g
    partners = rng.choice(others, size=k, replace=False)
    flips = np.sort(pair_keys(np.full(k, target), partners, g.n))
    keys = np.setxor1d(g.keys, flips, assume_unique=True)
    return g.with_keys(keys)


def smoothed_prediction(tally: VoteTally, alpha: float) -> np.ndarray:
    """Majority class per node, -1 where the node abstains."""
    pred = np.argmax(np.atleast_2d(tally.counts), axis=1)
    return np.where(abstain_test(tally, alpha), -1, pred)


def run_empirical_eval(cfg: ExperimentConfig, attack_budget: int, targets, write: bool = True,
                       prepared: Prepared | None = None) -> Report:
    timer = StageTimer()
    prep = prepared or prepare(cfg, timer, "sparse")
    targets = np.asarray(targets, dtype=np.int64)
    bad = np.setdiff1d(targets, prep.test_nodes)
    if bad.size:
        raise ValueError(f"targets outside the test set: {bad[:5].tolist()}")
    s, c = cfg.smoothing, cfg.certify
    noise = SparseNoiseConfig(s.p_plus, s.p_minus, stream_seed(cfg.run.seed, "noise"))
    fcfg = FilterConfig(cfg.filter.kind, cfg.filter.theta)
    g = prep.g
    labels = g.labels[targets]
    with timer.stage("sample"):
        before_tally = smooth_votes(g, prep.params, noise, fcfg, c.n_samples, targets,
                                    prep.rewirer, cfg.run.threads)
        before = smoothed_prediction(before_tally, c.alpha)
    after = np.empty_like(before)
    with timer.stage("attack"):
        for i, t in enumerate(targets):
            rng = stream_rng(stream_seed(cfg.run.seed, "attack"), int(t))
            ga = random_flip_attack(g, int(t), attack_budget, rng)
            tl = smooth_votes(ga, prep.params, noise, fcfg, c.n_samples, np.array([t]),
                              prep.rewirer, cfg.run.threads)
            after[i] = smoothed_prediction(tl, c.alpha)[0]
    acc_before = float(np.mean(before == labels))
    acc_after = float(np.mean(after == labels))
    report = Report("attack", acc_before, float(np.mean(before < 0)), {},
                    extra={"attack_budget": attack_budget, "accuracy_before": acc_before,
                           "accuracy_after": acc_after, "targets": targets,
                           "prediction_before": before, "prediction_after": after})
    return _finish(cfg, report, timer, write)


def format_report(d: dict) -> str:
    lines = [f"scheme          {d.get('scheme')}",
             f"clean accuracy  {d.get('clean_accuracy')}",
             f"abstain rate    {d.get('abstain_rate')}"]
    ca = d.get("certified_accuracy") or {}
    if ca:
        lines.append("certified accuracy:")
        for k, v in ca.items():
            lines.append(f"  {k:>8}  {v}")
    t = d.get("timings") or {}
    if t:
        lines.append("timings (s): " + ", ".join(f"{k}={v}" for k, v in t.items()))
    return "\n".join(lines)
