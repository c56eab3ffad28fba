"""Gradient-boosted regression trees with GBDT, DART and GOSS training modes.

Trees are grown by exact greedy search over sorted feature values using
second-order (gradient/hessian) gain with an L2 penalty on leaf values.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._backend import kernels

GBDT = "gbdt"
DART = "dart"
GOSS = "goss"
MODES = (GBDT, DART, GOSS)

SQUARED_ERROR = "squared_error"
LOGISTIC = "logistic"
LOSSES = (SQUARED_ERROR, LOGISTIC)

FORMAT_NAME = "mpapkit.ensemble"
FORMAT_VERSION = 1


class BoostError(ValueError):
    pass


class ConfigError(BoostError):
    pass


@dataclass(frozen=True)
class BoostingConfig:
    mode: str = GBDT
    loss: str = SQUARED_ERROR
    n_trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_samples_leaf: int = 3
    min_gain: float = 0.0
    feature_fraction: float = 1.0
    reg_lambda: float = 1.0
    # DART
    drop_rate: float = 0.1
    max_dropped: int = 0  # 0 means no cap
    force_drop: bool = True
    # GOSS
    top_rate: float = 0.2
    other_rate: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.n_trees < 0:
            raise ConfigError("n_trees must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must be in (0, 1]")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ConfigError("max_depth >= 0 and min_samples_leaf >= 1 required")
        if not 0 < self.feature_fraction <= 1:
            raise ConfigError("feature_fraction must be in (0, 1]")
        if self.reg_lambda < 0 or self.min_gain < 0:
            raise ConfigError("reg_lambda and min_gain must be non-negative")
        if not 0 <= self.drop_rate <= 1:
            raise ConfigError("drop_rate must be in [0, 1]")
        _check_goss_rates(self.top_rate, self.other_rate)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


def _check_goss_rates(a, b):
    if a < 0 or b < 0 or a + b > 1 + 1e-12:
        raise ConfigError(f"GOSS rates need a >= 0, b >= 0, a + b <= 1 (got a={a}, b={b})")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def loss_value(loss, targets, predictions):
    """Summed loss; ``predictions`` are raw scores (log-odds for logistic)."""
    y = np.asarray(targets, dtype=np.float64)
    f = np.asarray(predictions, dtype=np.float64)
    if loss == SQUARED_ERROR:
        return float(0.5 * np.sum((f - y) ** 2))
    if loss == LOGISTIC:
        # log(1 + e^f) - y f, stable for both signs
        return float(np.sum(np.logaddexp(0.0, f) - y * f))
    raise ConfigError(f"unknown loss {loss!r}")


def loss_gradients(loss, targets, predictions):
    """First and second derivatives of :func:`loss_value` per sample."""
    y = np.asarray(targets, dtype=np.float64)
    f = np.asarray(predictions, dtype=np.float64)
    if y.shape != f.shape:
        raise BoostError(f"length mismatch: {y.shape} vs {f.shape}")
    if loss == SQUARED_ERROR:
        return f - y, np.ones_like(f)
    if loss == LOGISTIC:
        p = sigmoid(f)
        return p - y, p * (1.0 - p)
    raise ConfigError(f"unknown loss {loss!r}")


@dataclass
class Tree:
    """Regression tree in flat preorder layout.

    Node ``i`` is a leaf when ``feature[i] < 0``; otherwise rows with
    ``x[feature] <= threshold`` go to ``left[i]`` (NaN follows
    ``default_left``). Leaf values are the raw Newton step -G/(H + lambda).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    default_left: np.ndarray = None
    gain: np.ndarray = None

    def __post_init__(self):
        self.feature = np.ascontiguousarray(self.feature, dtype=np.intc)
        self.threshold = np.ascontiguousarray(self.threshold, dtype=np.float64)
        self.left = np.ascontiguousarray(self.left, dtype=np.intc)
        self.right = np.ascontiguousarray(self.right, dtype=np.intc)
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.default_left is None:
            self.default_left = np.ones(self.feature.size, dtype=np.int8)
        self.default_left = np.ascontiguousarray(self.default_left, dtype=np.int8)
        if self.gain is None:
            self.gain = np.zeros(self.feature.size)
        internal = self.feature >= 0
        if np.any(internal & ((self.left < 0) | (self.right < 0))):
            raise BoostError("internal node without two children")
        if not np.all(np.isfinite(self.value)):
            raise BoostError("non-finite leaf value")

    @classmethod
    def leaf(cls, value):
        return cls([-1], [0.0], [-1], [-1], [value])

    @classmethod
    def stump(cls, feature, threshold, left_value, right_value):
        return cls([feature, -1, -1], [threshold, 0.0, 0.0], [1, -1, -1], [2, -1, -1],
                   [0.0, left_value, right_value])

    @property
    def n_nodes(self):
        return int(self.feature.size)

    @property
    def is_leaf(self):
        return self.feature[0] < 0

    def depth(self):
        def d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def predict(self, X):
        X = _as_matrix(X)
        return kernels.predict_forest(X, self.feature, self.threshold, self.left, self.right,
                                      self.value, self.default_left,
                                      np.zeros(1, dtype=np.int_), np.ones(1), 0.0)

    def to_nodes(self):
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"value": float(self.value[i])})
            else:
                nodes.append({
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                    "default_left": bool(self.default_left[i]),
                    "value": float(self.value[i]),
                })
        return nodes

    @classmethod
    def from_nodes(cls, nodes):
        feature, threshold, left, right, value, default_left = [], [], [], [], [], []
        for node in nodes:
            internal = "feature" in node
            feature.append(node["feature"] if internal else -1)
            threshold.append(node.get("threshold", 0.0))
            left.append(node.get("left", -1))
            right.append(node.get("right", -1))
            value.append(node["value"])
            default_left.append(node.get("default_left", True))
        return cls(feature, threshold, left, right, value, default_left)


def _as_matrix(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise BoostError(f"expected a 2-D feature matrix, got shape {X.shape}")
    return X


def _presort(X):
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T, dtype=np.intc)


def _grow(workspace, gw, hw, selected, features, config):
    out = workspace.grow(gw, hw, selected, features, config.max_depth,
                         config.min_samples_leaf, config.min_gain, config.reg_lambda)
    feature, threshold, left, right, value, gain, _count = out
    return Tree(feature, threshold, left, right, value, gain=gain)


def build_tree(X, gradients, hessians, sample_weights=None, config=None, features=None):
    """Grow one tree on weighted gradient statistics.

    Split gain is G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l) over weighted sums;
    candidates are midpoints between consecutive distinct values. Ties go to
    the lowest feature index, then the lowest threshold.
    """
    config = config or BoostingConfig()
    X = _as_matrix(X)
    if X.shape[0] == 0:
        raise BoostError("cannot build a tree on zero rows")
    if np.isnan(X).any():
        raise BoostError("missing values must be imputed before training")
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    w = np.ones(X.shape[0]) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if np.any(w < 0):
        raise BoostError("sample weights must be non-negative")
    selected = np.ascontiguousarray(w > 0, dtype=np.int8)
    if not selected.any():
        raise BoostError("all sample weights are zero")
    if features is None:
        features = np.arange(X.shape[1], dtype=np.intc)
    features = np.ascontiguousarray(np.sort(features), dtype=np.intc)
    return _grow(kernels.TreeWorkspace(X, _presort(X)), np.ascontiguousarray(g * w), np.ascontiguousarray(h * w),
                 selected, features, config)


def goss_sample(gradients, a, b, rng):
    """Gradient-based one-side sampling.

    Keeps the ceil(a n) rows with largest |g| at weight 1 and draws ceil(b n)
    of the rest uniformly without replacement at weight (1 - a) / b.
    Returns (sorted selected indices, their weights).
    """
    _check_goss_rates(a, b)
    g = np.abs(np.asarray(gradients, dtype=np.float64))
    n = g.size
    n_top = min(n, math.ceil(a * n - 1e-9))
    ranked = np.argsort(-g, kind="stable")
    top = ranked[:n_top]
    rest = ranked[n_top:]
    n_other = min(rest.size, math.ceil(b * n - 1e-9)) if b > 0 else 0
    if n_other > 0:
        other = rng.choice(rest, size=n_other, replace=False)
        amplify = (1.0 - a) / b
    else:
        other = np.empty(0, dtype=ranked.dtype)
        amplify = 1.0
    idx = np.concatenate([top, other])
    weights = np.concatenate([np.ones(top.size), np.full(other.size, amplify)])
    order = np.argsort(idx, kind="stable")
    return idx[order], weights[order]


def dart_drop(n_existing, drop_rate, rng, max_dropped=0, force=True):
    """Pick trees to drop for one DART round.

    Returns (dropped indices, scale of the new tree, rescale of dropped trees):
    with k dropped the new tree gets 1/(k+1) and each dropped tree k/(k+1).
    """
    if not 0 <= drop_rate <= 1:
        raise ConfigError("drop_rate must be in [0, 1]")
    if n_existing == 0 or drop_rate == 0:
        return np.empty(0, dtype=np.int_), 1.0, 1.0
    mask = rng.random(n_existing) < drop_rate
    dropped = np.flatnonzero(mask)
    if dropped.size == 0 and force:
        dropped = np.array([rng.integers(n_existing)])
    if max_dropped and dropped.size > max_dropped:
        dropped = np.sort(rng.choice(dropped, size=max_dropped, replace=False))
    k = dropped.size
    if k == 0:
        return dropped, 1.0, 1.0
    return dropped, 1.0 / (k + 1), k / (k + 1)


@dataclass
class Ensemble:
    base_score: float
    trees: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    config: BoostingConfig = field(default_factory=BoostingConfig)
    seed: int = 0
    n_features: int = 0

    @property
    def mode(self):
        return self.config.mode

    @property
    def loss(self):
        return self.config.loss

    def _flat(self):
        trees = self.trees
        offsets = np.zeros(len(trees), dtype=np.int_)
        if trees:
            offsets[1:] = np.cumsum([t.n_nodes for t in trees])[:-1]

        def cat(name, dtype):
            if not trees:
                return np.zeros(0, dtype=dtype)
            return np.ascontiguousarray(np.concatenate([getattr(t, name) for t in trees]), dtype=dtype)

        return (cat("feature", np.intc), cat("threshold", np.float64), cat("left", np.intc),
                cat("right", np.intc), cat("value", np.float64), cat("default_left", np.int8),
                offsets, np.asarray(self.weights, dtype=np.float64))

    def decision_function(self, X):
        """Raw additive score base + sum_i w_i tree_i(x)."""
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise BoostError(f"expected {self.n_features} features, got {X.shape[1]}")
        return kernels.predict_forest(X, *self._flat(), float(self.base_score))

    def predict(self, X):
        raw = self.decision_function(X)
        return sigmoid(raw) if self.loss == LOGISTIC else raw

    def to_json(self):
        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "mode": self.mode,
            "loss": self.loss,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "n_features": self.n_features,
            "base_score": float(self.base_score),
            "trees": [{"weight": float(w), "nodes": t.to_nodes()}
                      for t, w in zip(self.trees, self.weights)],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != FORMAT_NAME:
            raise BoostError("not an ensemble document")
        if doc.get("version") != FORMAT_VERSION:
            raise BoostError(f"unsupported ensemble version {doc.get('version')}")
        config = BoostingConfig(**doc["config"])
        trees = [Tree.from_nodes(t["nodes"]) for t in doc["trees"]]
        weights = [t["weight"] for t in doc["trees"]]
        return cls(doc["base_score"], trees, weights, config, doc["seed"], doc["n_features"])


def predict(ensemble, X):
    return ensemble.predict(X)


def _base_score(loss, y):
    if loss == SQUARED_ERROR:
        return float(y[0]) if np.ptp(y) == 0 else float(np.mean(y))
    p = float(np.mean(y))
    if p <= 0.0 or p >= 1.0:
        raise BoostError("logistic loss needs both classes in the training targets")
    return math.log(p / (1.0 - p))


def train(X, y, config=None, seed=0, history=None):
    """Fit an ensemble; bit-for-bit reproducible for a given (data, config, seed).

    Randomness is split into independent streams for column sampling, GOSS and
    DART, so a degenerate sampler leaves the other draws untouched. Pass a list
    as ``history`` to collect the training loss after each round.
    """
    config = config or BoostingConfig()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n, n_feat = X.shape
    if y.shape != (n,):
        raise BoostError(f"targets shape {y.shape} does not match {n} rows")
    if n == 0:
        raise BoostError("cannot train on zero rows")
    if np.isnan(X).any():
        raise BoostError("missing values must be imputed before training")
    if not np.all(np.isfinite(y)):
        raise BoostError("targets must be finite")
    if config.loss == LOGISTIC and not np.all((y == 0) | (y == 1)):
        raise BoostError("logistic targets must be 0/1")

    base = _base_score(config.loss, y)
    feat_rng, goss_rng, dart_rng = (np.random.default_rng(s)
                                    for s in np.random.SeedSequence(seed).spawn(3))
    workspace = kernels.TreeWorkspace(X, _presort(X))
    all_features = np.arange(n_feat, dtype=np.intc)
    n_cols = max(1, math.ceil(config.feature_fraction * n_feat - 1e-9))
    all_rows = np.ones(n, dtype=np.int8)
    zero = np.zeros(1, dtype=np.int_)
    one = np.ones(1)

    trees, weights = [], []
    # per-tree training outputs, only needed to re-weight dropped DART trees
    outputs = np.empty((config.n_trees, n)) if config.mode == DART else None
    pred = np.full(n, base)
    for _ in range(config.n_trees):
        dropped = ()
        if config.mode == DART:
            dropped, new_scale, rescale = dart_drop(len(trees), config.drop_rate, dart_rng,
                                                    config.max_dropped, config.force_drop)
        else:
            new_scale = 1.0
        if len(dropped):
            keep = np.ones(len(trees), dtype=bool)
            keep[dropped] = False
            grad_pred = base + np.einsum("t,tn->n", np.asarray(weights)[keep],
                                         outputs[:len(trees)][keep])
        else:
            grad_pred = pred
        g, h = loss_gradients(config.loss, y, grad_pred)

        if config.mode == GOSS:
            idx, w = goss_sample(g, config.top_rate, config.other_rate, goss_rng)
            selected = np.zeros(n, dtype=np.int8)
            selected[idx] = 1
            wfull = np.zeros(n)
            wfull[idx] = w
            gw, hw = g * wfull, h * wfull
        else:
            selected, gw, hw = all_rows, g, h

        if n_cols < n_feat:
            features = np.sort(feat_rng.choice(n_feat, size=n_cols, replace=False)).astype(np.intc)
        else:
            features = all_features
        tree = _grow(workspace, np.ascontiguousarray(gw), np.ascontiguousarray(hw), selected,
                     features, config)
        out = kernels.predict_forest(X, tree.feature, tree.threshold, tree.left, tree.right,
                                     tree.value, tree.default_left, zero, one, 0.0)
        weight = config.learning_rate * new_scale
        trees.append(tree)
        weights.append(weight)
        if config.mode == DART:
            outputs[len(trees) - 1] = out
        if len(dropped):
            for i in dropped:
                weights[i] *= rescale
            pred = base + np.einsum("t,tn->n", np.asarray(weights), outputs[:len(trees)])
        else:
            pred = pred + weight * out
        if history is not None:
            history.append(loss_value(config.loss, y, pred))

    return Ensemble(base, trees, weights, config, seed, n_feat)
