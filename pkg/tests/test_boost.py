import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpapkit import boost
from mpapkit.boost import BoostError, BoostingConfig, ConfigError, Ensemble, Tree


def leaf_of(tree, x):
    i = 0
    while tree.feature[i] >= 0:
        i = tree.left[i] if x[tree.feature[i]] <= tree.threshold[i] else tree.right[i]
    return i


def brute_force_stump(X, g, h, lam, min_leaf):
    """Best (gain, feature, threshold) by enumerating every midpoint."""
    G, H = g.sum(), h.sum()
    best = (0.0, -1, 0.0)
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = 0.5 * (lo + hi)
            mask = X[:, f] <= thr
            if mask.sum() < min_leaf or (~mask).sum() < min_leaf:
                continue
            gl, hl = g[mask].sum(), h[mask].sum()
            gain = gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - G ** 2 / (H + lam)
            if gain > best[0] + 1e-9:
                best = (gain, f, thr)
    return best


class TestConfig:
    @pytest.mark.parametrize("changes", [
        {"mode": "rf"}, {"loss": "huber"}, {"learning_rate": 0.0}, {"learning_rate": 1.5},
        {"min_samples_leaf": 0}, {"feature_fraction": 0.0}, {"reg_lambda": -1.0},
        {"drop_rate": 1.2}, {"top_rate": 0.7, "other_rate": 0.5},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            BoostingConfig(**changes)

    def test_dict_round_trip(self):
        c = BoostingConfig(mode="dart", n_trees=7, drop_rate=0.3)
        assert BoostingConfig(**c.to_dict()) == c


class TestBuildTree:
    def test_four_row_hand_split(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        g, h = boost.loss_gradients(boost.SQUARED_ERROR, y, np.full(4, 5.0))
        cfg = BoostingConfig(max_depth=1, min_samples_leaf=1, reg_lambda=0.0)
        tree = boost.build_tree(X, g, h, config=cfg)
        assert tree.feature[0] == 0
        assert tree.threshold[0] == 2.5
        assert tree.value[tree.left[0]] == -5.0
        assert tree.value[tree.right[0]] == 5.0
        # gain = 10^2/2 + 10^2/2 - 0
        assert tree.gain[0] == 100.0
        assert np.array_equal(tree.predict(X), [-5.0, -5.0, 5.0, 5.0])

    def test_homogeneous_target_is_single_leaf(self):
        X = np.arange(12.0).reshape(6, 2)
        g = np.zeros(6)
        tree = boost.build_tree(X, g, np.ones(6), config=BoostingConfig(min_samples_leaf=1))
        assert tree.is_leaf and tree.value[0] == 0.0

    def test_lambda_shrinks_leaf(self):
        X = np.array([[0.0], [1.0]])
        tree = boost.build_tree(X, [-2.0, -2.0], [1.0, 1.0], config=BoostingConfig(reg_lambda=2.0))
        assert tree.value[0] == pytest.approx(4.0 / 4.0)

    def test_min_samples_leaf_respected(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(40, 3))
        g = rng.normal(size=40)
        tree = boost.build_tree(X, g, np.ones(40), config=BoostingConfig(max_depth=6, min_samples_leaf=7))
        counts = np.bincount([leaf_of(tree, x) for x in X], minlength=tree.n_nodes)
        assert np.all(counts[tree.feature < 0] >= 7)

    def test_zero_weight_rows_are_ignored(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        g = np.array([1.0, 1.0, -1.0, 100.0])
        w = np.array([1.0, 1.0, 1.0, 0.0])
        tree = boost.build_tree(X, g, np.ones(4), sample_weights=w,
                                config=BoostingConfig(max_depth=1, min_samples_leaf=1, reg_lambda=0.0))
        assert tree.threshold[0] == 2.5
        assert tree.value[tree.right[0]] == 1.0

    def test_nan_rejected(self):
        with pytest.raises(BoostError):
            boost.build_tree([[np.nan], [1.0]], [1.0, 1.0], [1.0, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 30), st.integers(1, 4), st.floats(0.0, 5.0))
    def test_stump_matches_brute_force(self, seed, n, n_feat, lam):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, n_feat)).round(2)
        g = rng.normal(size=n)
        h = rng.uniform(0.5, 2.0, size=n)
        cfg = BoostingConfig(max_depth=1, min_samples_leaf=2, reg_lambda=lam)
        tree = boost.build_tree(X, g, h, config=cfg)
        gain, f, thr = brute_force_stump(X, g, h, lam, 2)
        if f < 0:
            assert tree.is_leaf
        else:
            assert tree.gain[0] == pytest.approx(gain, rel=1e-9, abs=1e-12)
            assert tree.feature[0] == f and tree.threshold[0] == thr

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_leaf_values_are_newton_steps(self, seed, depth):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 3))
        g, h = rng.normal(size=60), rng.uniform(0.1, 1.0, size=60)
        tree = boost.build_tree(X, g, h, config=BoostingConfig(max_depth=depth, reg_lambda=0.5))
        leaves = np.array([leaf_of(tree, x) for x in X])
        assert tree.depth() <= depth
        for leaf in np.unique(leaves):
            rows = leaves == leaf
            assert tree.value[leaf] == pytest.approx(-g[rows].sum() / (h[rows].sum() + 0.5), rel=1e-10)


class TestGoss:
    G = np.array([0.1, -5.0, 2.0, 0.3, -0.2, 4.0, 1.0, -0.05, 0.5, 3.0])

    def test_hand_trace(self):
        idx, w = boost.goss_sample(self.G, 0.2, 0.3, np.random.default_rng(0))
        assert {1, 5} <= set(idx.tolist())
        assert idx.size == 5 and np.all(np.diff(idx) > 0)
        top = np.isin(idx, [1, 5])
        assert np.all(w[top] == 1.0)
        assert np.allclose(w[~top], 0.8 / 0.3)

    def test_weighted_sum_is_unbiased(self):
        rng = np.random.default_rng(7)
        totals = []
        for _ in range(20_000):
            idx, w = boost.goss_sample(self.G, 0.2, 0.3, rng)
            totals.append(np.sum(w * self.G[idx]))
        totals = np.asarray(totals)
        se = totals.std() / np.sqrt(totals.size)
        assert abs(totals.mean() - self.G.sum()) < 4 * se

    def test_b_zero_keeps_top_only(self):
        idx, w = boost.goss_sample(self.G, 0.3, 0.0, np.random.default_rng(0))
        assert idx.tolist() == [1, 5, 9] and np.all(w == 1.0)

    def test_invalid_rates(self):
        with pytest.raises(ConfigError):
            boost.goss_sample(self.G, 0.6, 0.5, np.random.default_rng(0))


class TestDartDrop:
    def test_no_trees(self):
        dropped, new, old = boost.dart_drop(0, 0.5, np.random.default_rng(0))
        assert dropped.size == 0 and (new, old) == (1.0, 1.0)

    def test_drop_all(self):
        dropped, new, old = boost.dart_drop(4, 1.0, np.random.default_rng(0))
        assert dropped.tolist() == [0, 1, 2, 3]
        assert (new, old) == (1 / 5, 4 / 5)

    def test_cap(self):
        dropped, new, old = boost.dart_drop(10, 1.0, np.random.default_rng(0), max_dropped=2)
        assert dropped.size == 2 and (new, old) == (1 / 3, 2 / 3)

    def test_forced_single_drop(self):
        dropped, new, old = boost.dart_drop(5, 1e-12, np.random.default_rng(0))
        assert dropped.size == 1 and (new, old) == (0.5, 0.5)

    def test_unforced_may_drop_nothing(self):
        dropped, new, old = boost.dart_drop(5, 1e-12, np.random.default_rng(0), force=False)
        assert dropped.size == 0 and (new, old) == (1.0, 1.0)


def _regression_data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    y = 3 * X[:, 0] - 2 * (X[:, 1] > 0) + 0.1 * rng.normal(size=n)
    return X, y


class TestTrain:
    @pytest.mark.parametrize("mode", boost.MODES)
    def test_deterministic(self, mode):
        X, y = _regression_data()
        cfg = BoostingConfig(mode=mode, n_trees=15, feature_fraction=0.75)
        a = boost.train(X, y, cfg, seed=4)
        b = boost.train(X, y, cfg, seed=4)
        assert a.to_json() == b.to_json()
        assert boost.train(X, y, cfg, seed=5).to_json() != a.to_json()

    def test_constant_target_predicts_constant(self):
        X = np.random.default_rng(0).normal(size=(20, 3))
        model = boost.train(X, np.full(20, 31.7), BoostingConfig(n_trees=10))
        assert np.all(model.predict(X) == 31.7)

    def test_gbdt_training_loss_never_increases(self):
        X, y = _regression_data()
        history = []
        boost.train(X, y, BoostingConfig(n_trees=40, learning_rate=0.3), history=history)
        assert len(history) == 40
        assert all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:]))
        assert history[-1] < 0.2 * boost.loss_value(boost.SQUARED_ERROR, y, np.full(y.size, y.mean()))

    def test_dart_weights_follow_drop_scaling(self):
        X, y = _regression_data()
        model = boost.train(X, y, BoostingConfig(mode="dart", n_trees=5, drop_rate=1.0,
                                                 learning_rate=0.5), seed=0)
        # with every tree dropped each round, tree k enters at lr/(k+1)
        assert model.weights[-1] == pytest.approx(0.5 / 5)
        assert all(w > 0 for w in model.weights)

    def test_logistic_probabilities(self):
        X, y = _regression_data()
        labels = (y > 0).astype(float)
        model = boost.train(X, labels, BoostingConfig(loss="logistic", n_trees=20))
        p = model.predict(X)
        assert np.all((p > 0) & (p < 1))
        assert np.mean((p > 0.5) == labels) > 0.9

    def test_logistic_needs_both_classes(self):
        with pytest.raises(BoostError):
            boost.train(np.ones((4, 1)), np.zeros(4), BoostingConfig(loss="logistic"))

    def test_json_round_trip(self):
        X, y = _regression_data()
        model = boost.train(X, y, BoostingConfig(mode="goss", n_trees=12), seed=2)
        again = Ensemble.from_json(model.to_json())
        assert np.array_equal(again.predict(X), model.predict(X))
        assert again.config == model.config and again.seed == 2
        doc = json.loads(model.to_json())
        assert doc["mode"] == "goss" and len(doc["trees"]) == 12

    def test_json_version_checked(self):
        doc = json.loads(boost.train(*_regression_data(), BoostingConfig(n_trees=1)).to_json())
        doc["version"] = 99
        with pytest.raises(BoostError):
            Ensemble.from_json(json.dumps(doc))

    def test_width_mismatch(self):
        X, y = _regression_data()
        model = boost.train(X, y, BoostingConfig(n_trees=3))
        with pytest.raises(BoostError):
            model.predict(X[:, :3])

    def test_nan_in_features_rejected(self):
        X, y = _regression_data()
        X[3, 1] = np.nan
        with pytest.raises(BoostError):
            boost.train(X, y)

    def test_zero_trees_is_base_score(self):
        X, y = _regression_data()
        model = boost.train(X, y, BoostingConfig(n_trees=0))
        assert np.all(model.predict(X) == y.mean())


class TestTree:
    def test_stump_and_nodes_round_trip(self):
        t = Tree.stump(1, 0.5, -1.0, 2.0)
        X = np.array([[9.0, 0.4], [9.0, 0.5], [9.0, 0.6]])
        assert t.predict(X).tolist() == [-1.0, -1.0, 2.0]
        assert Tree.from_nodes(t.to_nodes()).predict(X).tolist() == [-1.0, -1.0, 2.0]
        assert t.depth() == 1 and Tree.leaf(3.0).depth() == 0

    def test_malformed(self):
        with pytest.raises(BoostError):
            Tree([0], [0.0], [-1], [-1], [0.0])
