"""Cross-validation schemes and Gaussian-process Bayesian optimisation."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from . import boost
from .cohort import standardize_apply, standardize_fit
from .metrics import auc_score

LOOCV = "loocv"
KFOLD = "kfold"
STRATIFIED = "stratified"
OBJECTIVES = ("mse", "auc")
N_INITIAL = 20


class TuneError(ValueError):
    pass


class FoldError(TuneError):
    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass(frozen=True)
class CvScheme:
    kind: str = KFOLD
    k: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (LOOCV, KFOLD, STRATIFIED):
            raise TuneError(f"unknown cv scheme {self.kind!r}")
        if self.kind != LOOCV and self.k < 2:
            raise TuneError("k-fold needs k >= 2")

    @classmethod
    def parse(cls, name, seed=0):
        """Accepts 'loocv', 'kfold8', 'stratified8' style names."""
        for kind in (STRATIFIED, KFOLD, LOOCV):
            if name.startswith(kind):
                rest = name[len(kind):]
                if kind == LOOCV and not rest:
                    return cls(LOOCV, 0, seed)
                if kind != LOOCV and rest.isdigit():
                    return cls(kind, int(rest), seed)
        raise TuneError(f"cannot parse cv scheme {name!r}")


def make_folds(n, labels=None, scheme=CvScheme()):
    """Test-index arrays that partition range(n).

    k-fold shuffles once and splits into contiguous chunks. Stratified folds
    shuffle each class separately and deal its members round-robin, with the
    dealer position carried over from one class to the next.
    """
    if scheme.kind == LOOCV:
        if n < 2:
            raise TuneError("leave-one-out needs at least 2 samples")
        return [np.array([i]) for i in range(n)]
    k = scheme.k
    if k > n:
        raise TuneError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(scheme.seed)
    if scheme.kind == KFOLD:
        return [np.sort(part) for part in np.array_split(rng.permutation(n), k)]
    if labels is None:
        raise TuneError("stratified folds need labels")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise TuneError("labels length does not match n")
    classes = np.unique(labels)
    if classes.size < 2:
        raise TuneError("stratified folds need both classes present")
    assign = np.empty(n, dtype=np.int64)
    dealer = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        assign[members] = (dealer + np.arange(members.size)) % k
        dealer = (dealer + members.size) % k
    return [np.flatnonzero(assign == f) for f in range(k)]


def cross_validate(X, y, folds, trainer, objective="mse", standardize=True):
    """Out-of-fold predictions and the objective over all of them.

    ``trainer(X_train, y_train)`` returns a callable mapping rows to
    predictions. The scaler is refit on each training fold.
    """
    if objective not in OBJECTIVES:
        raise TuneError(f"unknown objective {objective!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    oof = np.full(n, np.nan)
    seen = np.zeros(n, dtype=np.int64)
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        try:
            if train.size == 0:
                raise TuneError("empty training fold")
            Xtr, Xte = X[train], X[test]
            if standardize:
                scaler = standardize_fit(Xtr)
                Xtr, Xte = standardize_apply(scaler, Xtr), standardize_apply(scaler, Xte)
            oof[test] = trainer(Xtr, y[train])(Xte)
        except (ValueError, ArithmeticError) as exc:
            raise FoldError(f, exc) from exc
        seen[test] += 1
    if not np.all(seen == 1):
        raise TuneError("folds do not partition the samples")
    if objective == "mse":
        value = float(np.mean((oof - y) ** 2))
    else:
        value = auc_score(y, oof)
    return oof, value


# ---------------------------------------------------------------- search space

@dataclass(frozen=True)
class Param:
    name: str
    low: float
    high: float
    integer: bool = False
    log: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high) and self.low < self.high):
            raise TuneError(f"bad bounds for {self.name}: [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise TuneError(f"log-scaled {self.name} needs a positive lower bound")

    def decode(self, u):
        u = min(max(float(u), 0.0), 1.0)
        if self.log:
            v = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
        else:
            v = self.low + u * (self.high - self.low)
        if self.integer:
            return int(min(max(round(v), math.ceil(self.low)), math.floor(self.high)))
        return min(max(v, self.low), self.high)

    def encode(self, v):
        if self.log:
            return (math.log(v) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        return (v - self.low) / (self.high - self.low)


@dataclass(frozen=True)
class SearchSpace:
    params: tuple

    def __post_init__(self):
        names = [p.name for p in self.params]
        if not names or len(set(names)) != len(names):
            raise TuneError("search space needs unique parameter names")

    @property
    def dim(self):
        return len(self.params)

    def decode(self, u):
        return {p.name: p.decode(x) for p, x in zip(self.params, u)}

    def encode(self, values):
        return np.array([p.encode(values[p.name]) for p in self.params])


def boosting_space(mode, n_trees=(50, 1000), max_depth=(2, 8)):
    params = [
        Param("n_trees", *n_trees, integer=True),
        Param("learning_rate", 1e-3, 0.3, log=True),
        Param("max_depth", *max_depth, integer=True),
        Param("min_samples_leaf", 1, 30, integer=True),
        Param("feature_fraction", 0.5, 1.0),
        Param("reg_lambda", 1e-3, 10.0, log=True),
    ]
    if mode == boost.DART:
        params.append(Param("drop_rate", 0.0, 0.5))
    elif mode == boost.GOSS:
        params += [Param("top_rate", 0.05, 0.5), Param("other_rate", 0.05, 0.5)]
    return SearchSpace(tuple(params))


# ---------------------------------------------------------------- optimiser

@dataclass
class TuneResult:
    best_params: dict
    best_objective: float
    history: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.history)

    def running_best(self):
        vals = np.array([obj if math.isfinite(obj) else np.inf for _, obj in self.history])
        return np.minimum.accumulate(vals)

    def write_csv(self, path):
        names = list(self.history[0][0]) if self.history else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", *names])
            for i, (params, obj) in enumerate(self.history):
                w.writerow([i, repr(float(obj)), *(repr(params[k]) for k in names)])


def _matern52(A, B, length):
    d = np.sqrt(np.maximum(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1), 0.0)) / length
    s5 = math.sqrt(5.0) * d
    return (1.0 + s5 + 5.0 / 3.0 * d * d) * np.exp(-s5)


class _GaussianProcess:
    LENGTHS = np.geomspace(0.05, 2.0, 12)
    NOISES = (1e-6, 1e-3, 1e-2, 1e-1)

    def __init__(self, U, y):
        self.U = U
        self.mu, self.sd = y.mean(), y.std()
        if self.sd == 0.0:
            self.sd = 1.0
        z = (y - self.mu) / self.sd
        best = None
        for length in self.LENGTHS:
            K0 = _matern52(U, U, length)
            for noise in self.NOISES:
                try:
                    cf = cho_factor(K0 + noise * np.eye(len(U)), lower=True)
                except np.linalg.LinAlgError:
                    continue
                alpha = cho_solve(cf, z)
                lml = -0.5 * z @ alpha - np.log(np.diag(cf[0])).sum()
                if best is None or lml > best[0]:
                    best = (lml, length, cf, alpha)
        if best is None:
            raise TuneError("surrogate fit failed")
        _, self.length, self.cf, self.alpha = best

    def predict(self, V):
        Ks = _matern52(V, self.U, self.length)
        mean = Ks @ self.alpha
        v = cho_solve(self.cf, Ks.T)
        var = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 1e-12)
        return mean, np.sqrt(var)

    def expected_improvement(self, V, best_z):
        mean, sd = self.predict(V)
        gap = best_z - mean
        z = gap / sd
        return gap * norm.cdf(z) + sd * norm.pdf(z)


def bayes_optimize(space, objective_fn, budget=200, seed=0, n_initial=N_INITIAL,
                   n_candidates=2000, callback=None):
    """Minimise ``objective_fn(params)`` over ``space``.

    A scrambled Halton design of ``n_initial`` points is followed by
    expected-improvement proposals from a Matern 5/2 GP on the unit cube.
    Integer parameters are rounded on decode and the GP sees the rounded
    location. Non-finite objectives are kept in the history as failures but
    excluded from the surrogate.
    """
    if budget < n_initial:
        raise TuneError(f"budget {budget} is below the initial design size {n_initial}")
    rng = np.random.default_rng(seed)
    design = qmc.Halton(d=space.dim, scramble=True, seed=rng).random(n_initial)
    history, U_obs, y_obs = [], [], []

    def evaluate(u):
        params = space.decode(u)
        value = float(objective_fn(params))
        history.append((params, value))
        if math.isfinite(value):
            U_obs.append(np.clip(space.encode(params), 0.0, 1.0))
            y_obs.append(value)
        if callback is not None:
            callback(len(history) - 1, params, value)

    for u in design:
        evaluate(u)
    for _ in range(budget - n_initial):
        if len(y_obs) < 2:
            evaluate(rng.random(space.dim))
            continue
        U, y = np.array(U_obs), np.array(y_obs)
        gp = _GaussianProcess(U, y)
        best_z = (y.min() - gp.mu) / gp.sd
        cand = rng.random((n_candidates, space.dim))
        ei = gp.expected_improvement(cand, best_z)
        # local refinement around the most promising candidates and the incumbent
        seeds = np.vstack([cand[np.argsort(-ei, kind="stable")[:5]], U[np.argmin(y)]])
        local = np.clip(np.repeat(seeds, 40, axis=0)
                        + rng.normal(scale=0.03, size=(40 * len(seeds), space.dim)), 0.0, 1.0)
        cand = np.vstack([cand, local])
        ei = np.concatenate([ei, gp.expected_improvement(local, best_z)])
        evaluate(cand[int(np.argmax(ei))])

    finite = [(p, v) for p, v in history if math.isfinite(v)]
    if not finite:
        raise TuneError("every objective evaluation failed")
    best_params, best_value = min(finite, key=lambda pv: pv[1])
    return TuneResult(dict(best_params), best_value, history)


# ---------------------------------------------------------------- boosting glue

def boosting_trainer(config, seed):
    def trainer(X, y):
        ensemble = boost.train(X, y, config, seed=seed)
        return ensemble.predict
    return trainer


def tune_boosting(X, y, base_config, space, folds, budget=200, seed=0, n_initial=N_INITIAL,
                  callback=None):
    """Bayesian search over ``space`` with ``folds`` as the CV objective.

    Regression minimises MSE; classification maximises AUC (minimising 1 - AUC).
    """
    logistic = base_config.loss == boost.LOGISTIC

    def objective(params):
        config = base_config.replace(**params)
        _, value = cross_validate(X, y, folds, boosting_trainer(config, seed),
                                  "auc" if logistic else "mse")
        return 1.0 - value if logistic else value

    return bayes_optimize(space, objective, budget=budget, seed=seed, n_initial=n_initial,
                          callback=callback)
