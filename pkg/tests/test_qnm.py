import json

import numpy as np
import pytest

from yieldforge import qnm as Q
from yieldforge.shapefn import forward_batch


def frozen(model, values):
    """Make every shape function output the constant values[i]."""
    for net, v in zip(model.shape_fns, values):
        for W in net.weights:
            W[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
        net.biases[-1][:] = np.arctanh(v)
    return model


def small(D, mode, seed=0):
    return Q.init_model(D, mode, M=3, hidden_sizes=(6, 4), seed=seed)


def test_pair_count():
    for D in range(1, 6):
        assert len(Q.pair_indices(D)) == D * (D + 1) // 2
    assert small(4, "QNM").w_hat.size == 10


def test_zero_weights_predict_zero():
    m = small(3, "QNM")
    m.w[:] = 0
    m.w_hat[:] = 0
    X = np.random.default_rng(0).uniform(0, 1, (20, 3))
    assert np.all(Q.predict_batch(m, X) == 0.0)


def test_frozen_constant_net_arithmetic():
    m = frozen(small(1, "NAM"), [0.5])
    m.w[:] = 2.0
    assert Q.predict(m, [0.3]) == pytest.approx(1.0, abs=1e-14)
    q = frozen(small(1, "QNM"), [0.5])
    q.w[:] = 2.0
    q.w_hat[:] = 4.0
    assert Q.predict(q, [0.3]) == pytest.approx(2.0, abs=1e-14)


def test_qnm_matches_explicit_sum():
    m = small(3, "QNM", seed=4)
    X = np.random.default_rng(1).uniform(0, 1, (15, 3))
    F = np.column_stack([forward_batch(net, X[:, i]).output for i, net in enumerate(m.shape_fns)])
    expect = F @ m.w
    Wm = m.w_hat_matrix()
    for i in range(3):
        for j in range(i, 3):
            expect = expect + Wm[i, j] * F[:, i] * F[:, j]
    assert np.allclose(Q.predict_batch(m, X), expect, rtol=0, atol=1e-14)


def test_four_piece_form_evaluates_consistently():
    # 1.39 f1 + 2.18 f2 + 0.24 f3 - 0.22 f1 f3 with frozen pieces
    m = frozen(small(3, "QNM"), [0.1, -0.4, 0.7])
    m.w[:] = [1.39, 2.18, 0.24]
    m.w_hat[:] = 0.0
    m.w_hat[m.pairs.index((0, 2))] = -0.22
    expect = 1.39 * 0.1 + 2.18 * -0.4 + 0.24 * 0.7 - 0.22 * 0.1 * 0.7
    assert Q.predict(m, [0.5, 0.5, 0.5]) == pytest.approx(expect, abs=1e-14)


def test_nam_has_no_quadratic_terms():
    m = small(3, "NAM")
    assert m.w_hat.size == 0 and m.pairs == []


def test_linear_in_w():
    m = small(2, "NAM", seed=2)
    X = np.random.default_rng(0).uniform(0, 1, (10, 2))
    base = Q.predict_batch(m, X)
    m.w *= 3.0
    assert np.allclose(Q.predict_batch(m, X), 3.0 * base)


def test_dimension_mismatch():
    m = small(3, "NAM")
    with pytest.raises(Q.DimensionMismatch):
        Q.predict_batch(m, np.zeros((4, 2)))
    with pytest.raises(Q.DimensionMismatch):
        Q.QnmModel(m.shape_fns, m.w, np.zeros(5), "QNM")


def test_loss_examples():
    m = frozen(small(2, "NAM"), [0.5, 0.25])
    m.w[:] = [1.0, -2.0]
    X = np.random.default_rng(0).uniform(0, 1, (7, 2))
    y = Q.predict_batch(m, X)
    terms = Q.loss(m, X, y, Q.SparsityConfig(alpha_lo=0.1))
    assert terms.mse == 0.0
    assert terms.sparsity_term == pytest.approx(0.3, abs=1e-15)
    Q.SparsityConfig(0.01, 0.001)
    with pytest.raises(Q.EmptyBatch):
        Q.loss(m, np.zeros((0, 2)), np.zeros(0))


def test_loss_gradients_match_fd():
    rng = np.random.default_rng(5)
    m = small(3, "QNM", seed=7)
    X = rng.uniform(0, 1, (12, 3))
    X[6:, 1] = X[:6, 1]  # repeated values exercise the unique-value scatter
    y = rng.normal(size=12)
    sp = Q.SparsityConfig(0.01, 0.02)
    _, grads = Q.loss_and_grads(m, X, y, sp)
    h = 1e-6
    worst = 0.0
    for p, g in zip(m.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = Q.loss(m, X, y, sp).total
            p[idx] = old - h
            lm = Q.loss(m, X, y, sp).total
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    assert worst <= 1e-4


def test_zero_epoch_train_returns_init():
    m = small(2, "QNM", seed=3)
    X = np.random.default_rng(0).uniform(0, 1, (10, 2))
    out, trace = Q.train(m, X, np.zeros(10), Q.TrainConfig(epochs=0))
    assert out.to_dict() == m.to_dict()
    assert trace.epoch == []


def test_training_lowers_loss_and_is_deterministic():
    X = np.random.default_rng(0).uniform(0, 1, (40, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    cfg = Q.TrainConfig(epochs=150, lr=0.01)
    a, ta = Q.train(small(2, "NAM"), X, y, cfg)
    b, tb = Q.train(small(2, "NAM"), X, y, cfg)
    assert ta.mse[-1] < 0.5 * ta.mse[0]
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert len(ta.w) == 150


def test_minibatch_training_runs():
    X = np.random.default_rng(0).uniform(0, 1, (30, 2))
    m, tr = Q.train(small(2, "NAM"), X, X[:, 0], Q.TrainConfig(epochs=5, batch_size=8))
    assert len(tr.mse) == 5


def test_divergence_detected():
    m = small(1, "NAM")
    X = np.linspace(0, 1, 5)[:, None]
    with pytest.raises(Q.DivergenceDetected):
        Q.train(m, X, np.array([0, 0, np.inf, 0, 0]), Q.TrainConfig(epochs=3))


def test_trace_csv(tmp_path):
    m = small(2, "QNM")
    X = np.random.default_rng(0).uniform(0, 1, (10, 2))
    m2, tr = Q.train(m, X, X[:, 0], Q.TrainConfig(epochs=3))
    tr.write_csv(tmp_path / "t.csv", m2)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[:5] == ["epoch", "mse", "sparsity", "w_x0", "w_x1"]
    assert len(lines) == 4


def test_feature_report_ordering_and_samples():
    m = small(3, "NAM")
    m.w[:] = [0.43, 5.27, -3.82]
    m.feature_names = ["p", "rho", "theta"]
    rep = Q.feature_report(m)
    assert [t.term for t in rep.terms] == ["w_rho", "w_theta", "w_p"]
    x, f = rep.samples["rho"]
    assert x.size == 256 and f.size == 256


def test_feature_report_zero_model_stable():
    m = small(2, "QNM")
    m.w[:] = 0
    m.w_hat[:] = 0
    rep = Q.feature_report(m)
    assert [t.term for t in rep.terms] == ["w_x0", "w_x1", "w_hat_x0_x0", "w_hat_x0_x1", "w_hat_x1_x1"]
    assert all(t.coefficient == 0 for t in rep.terms)


def test_json_round_trip(tmp_path):
    m = small(3, "QNM", seed=9)
    m.normalization = Q.Normalization(np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 5.0]))
    m.target_scale = 12.5
    m.save(tmp_path / "m.json")
    back = Q.QnmModel.load(tmp_path / "m.json")
    X = np.random.default_rng(0).uniform(0, 1, (8, 3))
    assert np.array_equal(Q.predict_batch(back, X), Q.predict_batch(m, X))
    assert back.target_scale == 12.5
    assert np.array_equal(back.normalization.lo, m.normalization.lo)


def test_normalization_maps_to_unit_box():
    X = np.random.default_rng(0).normal(size=(50, 3)) * [1, 10, 100]
    n = Q.Normalization.fit(X)
    Xn = n.apply(X)
    assert np.allclose(Xn.min(axis=0), 0) and np.allclose(Xn.max(axis=0), 1)
    assert np.allclose(n.invert(Xn), X)


def test_fit_dataset_scales_targets():
    X = np.random.default_rng(0).uniform(-5, 5, (30, 2))
    y = 100 * X[:, 0]
    m, _ = Q.fit_dataset(X, y, "NAM", Q.TrainConfig(epochs=0), M=2, hidden_sizes=(3,))
    assert m.target_scale == pytest.approx(np.abs(y).max())
    assert np.allclose(m.normalization.lo, X.min(axis=0))
