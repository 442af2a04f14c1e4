import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from auditvotes.classifiers import (CHECKPOINT_VERSION, Adam, GcnParams, MlpParams, TrainConfig, export_json,
                                    gcn_forward, gcn_logits, gcn_loss_and_grad, init_gcn, init_mlp,
                                    load_params, mlp_forward, mlp_loss_and_grad, save_params,
                                    softmax, train_classifier, train_mlp)
from auditvotes.graph import SparseGraph
from auditvotes.smoothing import SparseNoiseConfig

import oracles


def _random_graph(rng, n, d, p=0.4):
    iu = np.triu_indices(n, 1)
    pick = rng.random(iu[0].size) < p
    x = rng.standard_normal((n, d))
    return SparseGraph.from_edges(n, np.c_[iu[0][pick], iu[1][pick]], features=x)


# ---------------------------------------------------------------------------
# forward passes

def test_zero_output_weights_uniform(sbm):
    p = init_gcn(sbm.num_features, 8, 3, seed=0)
    p.w2[:] = 0.0
    pred = gcn_forward(sbm, p)
    assert np.allclose(pred.probabilities, 1 / 3)
    assert np.all(pred.class_index == 0)


def test_isolated_node_is_dense_network(rng):
    x = rng.standard_normal((1, 4))
    p = GcnParams(rng.standard_normal((4, 3)), rng.standard_normal((3, 2)))
    g = SparseGraph.from_edges(1, [], features=x)
    assert np.allclose(gcn_logits(g, p), np.maximum(x @ p.w1, 0) @ p.w2, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_logits_match_dense_reference(seed, backend):
    rng = np.random.default_rng(seed)
    g = _random_graph(rng, 6, 4)
    p = GcnParams(rng.standard_normal((4, 3)), rng.standard_normal((3, 2)))
    ref = oracles.dense_gcn_logits(g.adjacency.toarray(), g.features.toarray(), p.w1, p.w2)
    assert np.max(np.abs(gcn_logits(g, p) - ref)) < 1e-10


def test_prediction_invariants(sbm):
    pred = gcn_forward(sbm, init_gcn(sbm.num_features, 8, 3, seed=1))
    assert np.allclose(pred.probabilities.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(pred.confidence, pred.probabilities.max(axis=1))
    assert np.all(pred.confidence > 0) and np.all(pred.confidence <= 1)


def test_mirrored_edges_same_output(rng):
    g = _random_graph(rng, 10, 3)
    e = g.edges
    doubled = SparseGraph.from_edges(10, np.r_[e, e[:, ::-1]], features=g.features)
    p = init_gcn(3, 5, 2, seed=2)
    assert np.array_equal(gcn_logits(g, p), gcn_logits(doubled, p))


def test_gcn_shape_mismatch(sbm):
    with pytest.raises(ValueError):
        gcn_forward(sbm, init_gcn(sbm.num_features + 1, 4, 3, seed=0))
    with pytest.raises(ValueError):
        gcn_forward(sbm, GcnParams(np.zeros((sbm.num_features, 4)), np.zeros((5, 3))))


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(p, [[0.5, 0.5, 0.0]])


def test_mlp_zero_weights_uniform():
    p = MlpParams(np.zeros((4, 3)), np.zeros((5, 4)))
    pred = mlp_forward(np.ones(3), p)
    assert np.allclose(pred.probabilities, 0.2) and pred.class_index == 0


@given(st.floats(-50, 50).filter(lambda v: abs(v) > 1e-12))
def test_mlp_sign_classifier(v):
    # one hidden unit passes positive inputs; the output layer votes it to class 1
    p = MlpParams(np.array([[1.0]]), np.array([[-1.0], [1.0]]))
    assert mlp_forward(np.array([v]), p).class_index == int(v > 0)


def test_mlp_shape_mismatch():
    with pytest.raises(ValueError):
        mlp_forward(np.ones(4), init_mlp(3, 5, 2, seed=0))


# ---------------------------------------------------------------------------
# gradients

def _grad_check(loss, arrays, grads, rng, coords=10):
    worst = 0.0
    for name, arr in arrays.items():
        for _ in range(coords):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            num = oracles.central_difference(loss, arr, idx)
            worst = max(worst, oracles.relative_error(num, grads[name][idx]))
    return worst


def test_gcn_gradient_small_graph(rng):
    g = _random_graph(rng, 12, 5)
    labels = rng.integers(0, 3, 12)
    p = GcnParams(rng.standard_normal((5, 4)), rng.standard_normal((4, 3)))
    nodes = np.arange(0, 12, 2)
    loss = lambda: gcn_loss_and_grad(g, p, nodes, labels, 1e-2)[0]
    _, gr = gcn_loss_and_grad(g, p, nodes, labels, 1e-2)
    assert _grad_check(loss, p.arrays(), gr.arrays(), rng) < 1e-4


def test_mlp_gradient(rng):
    x = rng.standard_normal((30, 4))
    y = rng.integers(0, 3, 30)
    p = MlpParams(rng.standard_normal((6, 4)), rng.standard_normal((3, 6)))
    loss = lambda: mlp_loss_and_grad(p, x, y, 1e-2)[0]
    _, gr = mlp_loss_and_grad(p, x, y, 1e-2)
    assert _grad_check(loss, p.arrays(), gr.arrays(), rng) < 1e-4


# ---------------------------------------------------------------------------
# training

FAST = dict(learning_rate=0.01, weight_decay=5e-4, max_epochs=200, patience=50, hidden=32)


def _logistic_accuracy(x_tr, y_tr, x_te, y_te, c):
    """Independent separability check: multinomial logistic regression by L-BFGS."""
    d = x_tr.shape[1]

    def f(w):
        w = w.reshape(d, c)
        z = x_tr @ w
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        p = np.exp(z - lse[:, None])
        onehot = np.eye(c)[y_tr]
        return np.mean(lse - z[np.arange(len(y_tr)), y_tr]) + 1e-3 * (w ** 2).sum(), \
            (x_tr.T @ (p - onehot) / len(y_tr) + 2e-3 * w).ravel()

    w = minimize(f, np.zeros(d * c), jac=True, method="L-BFGS-B").x.reshape(d, c)
    return np.mean(np.argmax(x_te @ w, axis=1) == y_te)


def test_fixture_is_separable(sbm, sbm_split):
    x = sbm.features.toarray()
    y = sbm.labels
    acc = _logistic_accuracy(x[sbm_split.labeled_train], y[sbm_split.labeled_train],
                             x[sbm_split.validation], y[sbm_split.validation], 3)
    assert acc > 0.9


def test_training_reaches_high_validation_accuracy(sbm, sbm_split):
    params = train_classifier(sbm, sbm_split, TrainConfig(**FAST, seed=0))
    g_val = sbm.subgraph(sbm_split.val_graph_nodes)
    vl = np.searchsorted(sbm_split.val_graph_nodes, sbm_split.validation)
    acc = np.mean(gcn_forward(g_val, params).class_index[vl] == sbm.labels[sbm_split.validation])
    assert acc > 0.9


def test_zero_epochs_returns_init(sbm, sbm_split):
    cfg = TrainConfig(max_epochs=0, patience=0, hidden=8, seed=4)
    p = train_classifier(sbm, sbm_split, cfg)
    ref = init_gcn(sbm.num_features, 8, 3, seed=4)
    assert np.array_equal(p.w1, ref.w1) and np.array_equal(p.w2, ref.w2)


def test_training_deterministic(sbm, sbm_split):
    cfg = TrainConfig(**{**FAST, "max_epochs": 30, "patience": 30},
                      noise=SparseNoiseConfig(0.001, 0.2, seed=3), seed=1)
    a = train_classifier(sbm, sbm_split, cfg)
    b = train_classifier(sbm, sbm_split, cfg)
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)


def test_loss_non_increasing_early(sbm, sbm_split):
    g = sbm.subgraph(sbm_split.train_nodes)
    lt = np.searchsorted(sbm_split.train_nodes, sbm_split.labeled_train)
    p = init_gcn(sbm.num_features, 32, 3, seed=0)
    opt = Adam([p.w1.shape, p.w2.shape], 1e-3)
    losses = []
    for _ in range(20):
        loss, gr = gcn_loss_and_grad(g, p, lt, g.labels, 1e-3)
        losses.append(loss)
        opt.step([p.w1, p.w2], [gr.w1, gr.w2])
    assert np.all(np.diff(losses) <= 1e-12)


def test_class_relabeling_equivariant(sbm, sbm_split):
    perm = np.array([2, 0, 1])
    cfg = TrainConfig(**{**FAST, "max_epochs": 20, "patience": 20}, seed=3)
    init = init_gcn(sbm.num_features, 32, 3, seed=3)
    relabeled = SparseGraph(sbm.n, sbm.keys, sbm.features, perm[sbm.labels])
    init_perm = GcnParams(init.w1.copy(), np.empty_like(init.w2))
    init_perm.w2[:, perm] = init.w2
    a = train_classifier(sbm, sbm_split, cfg, init=init)
    b = train_classifier(relabeled, sbm_split, cfg, init=init_perm)
    pa = gcn_forward(sbm, a).probabilities
    pb = gcn_forward(sbm, b).probabilities
    assert np.allclose(pb[:, perm], pa, atol=1e-10)


def test_training_needs_labels(sbm, sbm_split):
    g = SparseGraph(sbm.n, sbm.keys, sbm.features)
    with pytest.raises(ValueError):
        train_classifier(g, sbm_split, TrainConfig(max_epochs=1, patience=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=20)


def test_mlp_learns_blobs():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.standard_normal((400, 2)) + 3.0 * np.c_[2 * y - 1, np.zeros(400)]
    p = train_mlp(x, y, TrainConfig(learning_rate=0.05, max_epochs=200, patience=200, hidden=16))
    assert np.mean(mlp_forward(x, p).class_index == y) > 0.95


# ---------------------------------------------------------------------------
# checkpoints

@pytest.mark.parametrize("params", [init_gcn(5, 4, 3, seed=0), init_mlp(5, 4, 3, seed=0)])
def test_checkpoint_roundtrip(tmp_path, params):
    save_params(tmp_path / "m.npz", params, {"epochs": 7})
    back, meta = load_params(tmp_path / "m.npz")
    assert type(back) is type(params) and meta == {"epochs": 7}
    assert all(np.array_equal(back.arrays()[k], v) for k, v in params.arrays().items())
    export_json(tmp_path / "m.json", params)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["kind"] == type(params).__name__
    assert np.allclose(doc["w1"], params.w1)


def test_checkpoint_version_checked(tmp_path):
    p = init_gcn(2, 2, 2, seed=0)
    np.savez(tmp_path / "old.npz", format_version=np.int64(CHECKPOINT_VERSION + 1), kind=np.str_("GcnParams"),
             meta=np.str_("{}"), shapes=np.str_('{"w1": [2, 2], "w2": [2, 2]}'), **p.arrays())
    with pytest.raises(ValueError, match="version"):
        load_params(tmp_path / "old.npz")


def test_checkpoint_shape_header_checked(tmp_path):
    p = init_gcn(2, 2, 2, seed=0)
    np.savez(tmp_path / "bad.npz", format_version=np.int64(CHECKPOINT_VERSION), kind=np.str_("GcnParams"),
             meta=np.str_("{}"), shapes=np.str_('{"w1": [2, 3], "w2": [2, 2]}'), **p.arrays())
    with pytest.raises(ValueError, match="shape"):
        load_params(tmp_path / "bad.npz")
