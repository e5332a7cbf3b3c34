import numpy as np
import pytest

from crashsampler import predictor as P


@pytest.fixture(scope="module")
def feature_space(rng=None):
    rng = np.random.default_rng(0)
    oe = np.round(np.arange(67) * 0.1, 10)
    de = 3.75 + 0.5 * np.arange(15)
    mk = np.sort(rng.uniform(20.0, 110.0, 44))
    return oe, de, mk


def sample_features(space, n, seed):
    oe, de, mk = space
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.choice(oe, n), rng.choice(de, n), rng.choice(mk, n)])


def test_constant_outcome_predicts_constant(feature_space):
    x = sample_features(feature_space, 100, 1)
    y = np.full(100, 3.25)
    m = P.fit(x, y, "regression", seed=0)
    assert m is not None
    assert np.allclose(P.predict(m, x), 3.25)
    assert m.sigma == 0.0
    assert P.gate(m)


def test_separable_labels_beat_majority(feature_space):
    x = sample_features(feature_space, 500, 2)
    y = (x[:, 0] > 3.0).astype(float)
    m = P.fit(x, y, "classification", seed=3)
    assert m is not None
    assert m.holdout_metric > 0.0
    preds = P.predict(m, x)
    assert np.mean((preds >= 0.5) == (y >= 0.5)) >= 0.9
    assert preds.min() >= 0.0 and preds.max() <= 1.0


def test_insufficient_data_guards(feature_space):
    x = sample_features(feature_space, 10, 4)
    assert P.fit(x, np.arange(10.0), "regression", seed=0) is None
    x = sample_features(feature_space, 100, 5)
    assert P.fit(x, np.ones(100), "classification", seed=0) is None
    assert not P.gate(None)


def test_gate_boundary_inclusive(feature_space):
    x = sample_features(feature_space, 60, 6)
    y = np.arange(60.0)
    m = P.fit(x, y, "regression", seed=1)
    assert P.gate(m) == (m.holdout_metric >= 0.0)
    # explicit boundary semantics
    from dataclasses import replace
    assert P.gate(replace(m, holdout_metric=0.0))
    assert not P.gate(replace(m, holdout_metric=-1e-9))
    assert not P.gate(replace(m, holdout_metric=-0.3))


def test_determinism(feature_space):
    x = sample_features(feature_space, 200, 7)
    y = 2.0 * x[:, 0] + 0.3 * x[:, 2]
    m1 = P.fit(x, y, "regression", seed=11)
    m2 = P.fit(x, y, "regression", seed=11)
    assert np.array_equal(m1.node_value, m2.node_value)
    assert np.array_equal(P.predict(m1, x), P.predict(m2, x))
    m3 = P.fit(x, y, "regression", seed=12)
    assert not np.array_equal(m1.node_value, m3.node_value)


def test_query_order_invariance(feature_space):
    x = sample_features(feature_space, 150, 8)
    y = x[:, 1] * 1.5
    m = P.fit(x, y, "regression", seed=2)
    q = sample_features(feature_space, 40, 9)
    perm = np.random.default_rng(0).permutation(40)
    assert np.array_equal(P.predict(m, q)[perm], P.predict(m, q[perm]))


def test_single_stump_piecewise_constant(feature_space):
    x = sample_features(feature_space, 100, 10)
    y = (x[:, 0] > 2.0).astype(float) * 5.0
    m = P.fit(x, y, "regression", seed=4, n_trees=1, max_depth=1)
    preds = P.predict(m, x)
    assert np.unique(preds).size <= 2


def test_grid_prediction_matches_pointwise(feature_space):
    oe, de, mk = feature_space
    x = sample_features(feature_space, 400, 11)
    y = 0.5 * x[:, 0] - 0.2 * x[:, 1] + 0.05 * x[:, 2]
    m = P.fit(x, y, "regression", seed=5, bins=(oe, de, mk))
    event_bin = np.arange(44)
    g = P.predict_event_grid(m, oe.size, de.size, event_bin)
    idx = [(3, 5, 2), (40, 66, 14), (43, 0, 0)]
    pts = np.array([[oe[o], de[d], mk[e]] for e, o, d in idx])
    vals = P.predict(m, pts)
    for (e, o, d), v in zip(idx, vals):
        assert g[e, o, d] == pytest.approx(v, abs=1e-12)


def test_binary_sigma_bounded(feature_space):
    x = sample_features(feature_space, 300, 12)
    y = (x[:, 2] > 60.0).astype(float)
    m = P.fit(x, y, "classification", seed=6)
    p = P.predict(m, x)
    sigma = np.sqrt(p * (1 - p))
    assert np.all(sigma <= 0.5 + 1e-15)
