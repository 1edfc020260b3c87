"""Tree-structured Parzen Estimator tuning scored by stratified k-fold CV."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .core import LabeledDataset
from .models import FAMILIES, build_model


# --------------------------------------------------------------------------
# search spaces


@dataclass(frozen=True)
class Dimension:
    """One hyperparameter.

    kind is one of uniform_int, uniform_real, log_uniform_real, categorical.
    `condition` = (parent name, allowed parent values) makes it conditional.
    """

    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    options: tuple = ()
    condition: tuple | None = None

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.options:
                raise ValueError(f"{self.name}: categorical options must be nonempty")
            object.__setattr__(self, "options", tuple(self.options))
        elif self.kind in ("uniform_int", "uniform_real", "log_uniform_real"):
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError(f"{self.name}: need lo < hi, got ({self.lo}, {self.hi})")
            if self.kind == "log_uniform_real" and self.lo <= 0:
                raise ValueError(f"{self.name}: log-uniform bounds must be positive")
        else:
            raise ValueError(f"{self.name}: unknown dimension kind {self.kind!r}")

    @property
    def numeric(self) -> bool:
        return self.kind != "categorical"

    # numeric dims are modelled in an internal space (log for log-uniform)
    def bounds(self):
        if self.kind == "log_uniform_real":
            return math.log(self.lo), math.log(self.hi)
        return float(self.lo), float(self.hi)

    def to_internal(self, v):
        return math.log(v) if self.kind == "log_uniform_real" else float(v)

    def from_internal(self, u):
        lo, hi = self.bounds()
        u = min(max(u, lo), hi)
        if self.kind == "log_uniform_real":
            return min(max(math.exp(u), self.lo), self.hi)
        if self.kind == "uniform_int":
            return int(round(u))
        return float(u)

    def contains(self, v) -> bool:
        if self.kind == "categorical":
            return v in self.options
        if self.kind == "uniform_int" and int(v) != v:
            return False
        return self.lo <= v <= self.hi


def uniform_int(name, lo, hi, condition=None):
    return Dimension(name, "uniform_int", lo, hi, condition=condition)


def uniform_real(name, lo, hi, condition=None):
    return Dimension(name, "uniform_real", lo, hi, condition=condition)


def log_uniform_real(name, lo, hi, condition=None):
    return Dimension(name, "log_uniform_real", lo, hi, condition=condition)


def categorical(name, options, condition=None):
    return Dimension(name, "categorical", options=tuple(options), condition=condition)


class SearchSpace:
    """Ordered dimensions; a conditional dimension must follow its parent."""

    def __init__(self, dims):
        self.dims = list(dims)
        seen = {}
        for d in self.dims:
            if d.name in seen:
                raise ValueError(f"duplicate dimension {d.name!r}")
            if d.condition is not None:
                parent, values = d.condition
                if parent not in seen:
                    raise ValueError(f"{d.name}: parent {parent!r} must be declared earlier (no cycles)")
                if seen[parent].kind != "categorical":
                    raise ValueError(f"{d.name}: parent {parent!r} must be categorical")
                object.__setattr__(d, "condition", (parent, tuple(values)))
            seen[d.name] = d
        self.by_name = seen

    def __len__(self):
        return len(self.dims)

    def is_active(self, dim: Dimension, config: dict) -> bool:
        if dim.condition is None:
            return True
        parent, values = dim.condition
        return parent in config and config[parent] in values

    def validate(self, config: dict) -> list[str]:
        problems = []
        for d in self.dims:
            active = self.is_active(d, config)
            if active and d.name not in config:
                problems.append(f"missing active dimension {d.name!r}")
            elif not active and d.name in config:
                problems.append(f"inactive dimension {d.name!r} present")
            elif active and not d.contains(config[d.name]):
                problems.append(f"{d.name}={config[d.name]!r} out of bounds")
        return problems


def _prior_value(d: Dimension, rng):
    if d.kind == "categorical":
        return d.options[int(rng.integers(len(d.options)))]
    if d.kind == "uniform_int":
        return int(rng.integers(int(d.lo), int(d.hi) + 1))
    lo, hi = d.bounds()
    return d.from_internal(rng.uniform(lo, hi))


def sample_prior(space: SearchSpace, rng) -> dict:
    """Uniform random configuration; inactive conditional dims are left out."""
    config = {}
    for d in space.dims:
        if space.is_active(d, config):
            config[d.name] = _prior_value(d, rng)
    return config


# --------------------------------------------------------------------------
# trial log


@dataclass
class TrialRecord:
    index: int
    config: dict
    objective: float
    status: str = "ok"
    wall_time: float = 0.0
    error: str | None = None

    def to_dict(self, timing=True) -> dict:
        doc = asdict(self)
        if not timing:
            doc.pop("wall_time")
        if doc["error"] is None:
            doc.pop("error")
        return doc


@dataclass(frozen=True)
class TpeParams:
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 20
    bandwidth: str = "max(0.1*range, nearest-neighbour)"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be positive")
        if self.n_startup < 0:
            raise ValueError("n_startup must be non-negative")


def write_trial_log(trials, path, timing=True):
    with open(path, "w") as fh:
        for t in trials:
            fh.write(json.dumps(t.to_dict(timing), sort_keys=True) + "\n")


def read_trial_log(path) -> list[TrialRecord]:
    with open(path) as fh:
        return [TrialRecord(**json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# cross-validation


def stratified_folds(labels, k, seed=0) -> list[np.ndarray]:
    """Test-index arrays for k stratified folds.

    Each class is shuffled and dealt round-robin, continuing the deal across
    classes so fold sizes differ by at most one row.
    """
    y = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, counts = np.unique(y, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise ValueError(f"class {int(c)} has {n} rows, fewer than k={k} folds")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in classes])
    fold_of = np.empty(len(y), dtype=int)
    fold_of[order] = np.arange(len(order)) % k
    return [np.sort(np.flatnonzero(fold_of == f)) for f in range(k)]


def kfold_cv(d: LabeledDataset, model_spec: Callable, k=10, seed=0) -> float:
    """Unweighted mean of held-out fold accuracies.

    `model_spec` is a zero-argument callable returning an unfitted classifier.
    """
    folds = stratified_folds(d.labels, k, seed)
    n = len(d)
    scores = []
    for test in folds:
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        model = model_spec().fit(d.subset(train))
        pred = model.predict(d.features[test])
        scores.append(float(np.mean(pred == d.labels[test])))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# TPE


def _bandwidths(points, lo, hi):
    points = np.asarray(points, dtype=float)
    floor = 0.1 * (hi - lo)
    if len(points) < 2:
        return np.full(len(points), floor)
    diffs = np.abs(points[:, None] - points[None, :])
    np.fill_diagonal(diffs, np.inf)
    return np.maximum(floor, diffs.min(axis=1))


class _Parzen:
    """Equal-weight mixture of Gaussians truncated to [lo, hi]."""

    def __init__(self, points, lo, hi):
        self.lo, self.hi = lo, hi
        self.mu = np.asarray(points, dtype=float)
        self.sigma = _bandwidths(self.mu, lo, hi)
        self.mass = ndtr((hi - self.mu) / self.sigma) - ndtr((lo - self.mu) / self.sigma)

    def sample(self, rng):
        i = int(rng.integers(len(self.mu)))
        for _ in range(100):
            x = rng.normal(self.mu[i], self.sigma[i])
            if self.lo <= x <= self.hi:
                return x
        return float(np.clip(x, self.lo, self.hi))

    def logpdf(self, x):
        z = (x - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigma * self.mass)
        return math.log(max(dens.mean(), 1e-300))


class _Uniform:
    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def sample(self, rng):
        return rng.uniform(self.lo, self.hi)

    def logpdf(self, x):
        return -math.log(self.hi - self.lo)


class _Table:
    """Laplace-smoothed frequencies over categorical options."""

    def __init__(self, values, options):
        self.options = options
        counts = np.array([sum(1 for v in values if v == o) for o in options], dtype=float)
        self.p = (counts + 1.0) / (counts.sum() + len(options))

    def sample(self, rng):
        return self.options[int(rng.choice(len(self.options), p=self.p))]

    def logpdf(self, v):
        return math.log(self.p[self.options.index(v)])


def _density(dim: Dimension, trials):
    values = [t.config[dim.name] for t in trials if dim.name in t.config]
    if dim.kind == "categorical":
        return _Table(values, dim.options)
    lo, hi = dim.bounds()
    if not values:
        return _Uniform(lo, hi)
    return _Parzen([dim.to_internal(v) for v in values], lo, hi)


def _scored(history):
    return [t for t in history if np.isfinite(t.objective)]


def trial_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def tpe_suggest(history, space: SearchSpace, params: TpeParams | None = None) -> dict:
    """Next configuration to evaluate.

    Uniform prior sampling until `n_startup` trials succeeded; afterwards the
    best `gamma` share of trials defines l(x), the rest g(x), and the
    candidate drawn from l maximizing the summed log l/g over its active
    dimensions is returned.
    """
    params = params or TpeParams()
    if len(space) == 0:
        raise ValueError("search space is empty")
    rng = trial_rng(params.seed, len(history))
    scored = _scored(history)
    n_ok = sum(t.status == "ok" for t in history)
    if n_ok < params.n_startup or not scored:
        return sample_prior(space, rng)

    order = sorted(range(len(scored)), key=lambda i: (scored[i].objective, scored[i].index))
    n_good = max(1, math.ceil(params.gamma * len(scored)))
    good = [scored[i] for i in order[:n_good]]
    bad = [scored[i] for i in order[n_good:]]

    l_dens = {d.name: _density(d, good) for d in space.dims}
    g_dens = {}
    for d in space.dims:
        if bad:
            g_dens[d.name] = _density(d, bad)
        elif d.kind == "categorical":
            g_dens[d.name] = _Table([], d.options)
        else:
            g_dens[d.name] = _Uniform(*d.bounds())

    best, best_score = None, -math.inf
    for _ in range(params.n_candidates):
        cand, score = {}, 0.0
        for d in space.dims:
            if not space.is_active(d, cand):
                continue
            if d.kind == "categorical":
                v = l_dens[d.name].sample(rng)
                score += l_dens[d.name].logpdf(v) - g_dens[d.name].logpdf(v)
                cand[d.name] = v
            else:
                u = l_dens[d.name].sample(rng)
                v = d.from_internal(u)
                u = d.to_internal(v)
                score += l_dens[d.name].logpdf(u) - g_dens[d.name].logpdf(u)
                cand[d.name] = v
        if score > best_score:
            best, best_score = cand, score
    return best


def random_search_config(space: SearchSpace, seed, index) -> dict:
    """The configuration pure random search would try at trial `index`."""
    return sample_prior(space, trial_rng(seed, index))


class AllTrialsFailed(RuntimeError):
    def __init__(self, trials):
        self.trials = trials
        last = trials[-1].error if trials else "no trials"
        super().__init__(f"all {len(trials)} trials failed; last error: {last}")


def optimize(space: SearchSpace, d: LabeledDataset, model_family, max_iterations=150,
             params: TpeParams | None = None, k=10, cv_seed=None, log_path=None, timing=True,
             strategy="tpe", model_options=None):
    """Sequential TPE loop; returns ``(best_config, trials)``.

    `model_family` is a family name from :data:`odtdemand.models.FAMILIES` or a
    callable ``config -> unfitted classifier``. Failed fits are logged with
    status "failed" and objective 0 (accuracy 0). `strategy="random"`
    evaluates the prior samples only.
    """
    params = params or TpeParams()
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if callable(model_family):
        factory = model_family
    else:
        opts = dict(model_options or {})
        factory = lambda cfg: build_model(model_family, cfg, seed=params.seed, **opts)
    cv_seed = params.seed if cv_seed is None else cv_seed

    trials = []
    log = open(log_path, "w") if log_path else None
    try:
        for i in range(max_iterations):
            if strategy == "random":
                config = random_search_config(space, params.seed, i)
            else:
                config = tpe_suggest(trials, space, params)
            t0 = time.perf_counter()
            try:
                acc = kfold_cv(d, lambda: factory(config), k=k, seed=cv_seed)
                rec = TrialRecord(i, config, -acc, "ok")
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                rec = TrialRecord(i, config, 0.0, "failed", error=f"{type(exc).__name__}: {exc}")
            rec.wall_time = time.perf_counter() - t0
            trials.append(rec)
            if log:
                log.write(json.dumps(rec.to_dict(timing), sort_keys=True) + "\n")
                log.flush()
    finally:
        if log:
            log.close()

    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise AllTrialsFailed(trials)
    best = min(ok, key=lambda t: (t.objective, t.index))
    return best.config, trials


def incumbent_trace(trials) -> list[float]:
    """Running minimum of the objective."""
    out, best = [], math.inf
    for t in trials:
        best = min(best, t.objective)
        out.append(best)
    return out


# --------------------------------------------------------------------------
# family search spaces

_NEURAL_DIMS = [
    categorical("hidden_activation", ("tanh", "relu")),
    categorical("output_activation", ("softmax", "sigmoid")),
    categorical("initializer", ("glorot_uniform", "uniform", "normal")),
    categorical("dropout_rate", (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)),
    categorical("max_norm_constraint", (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)),
    uniform_int("neurons_per_hidden", 5, 50),
    categorical("batch_size", (10, 20, 40)),
    categorical("epochs", (100, 150, 300, 500)),
    categorical("optimizer", ("adadelta", "adam")),
]


def family_space(family: str) -> SearchSpace:
    if family == "rf":
        return SearchSpace([
            uniform_int("n_estimators", 10, 300),
            categorical("criterion", ("gini", "entropy")),
            uniform_int("max_depth", 2, 200),
            categorical("max_features", ("sqrt",)),
            log_uniform_real("min_samples_leaf", 0.001, 0.05),
            log_uniform_real("min_samples_split", 0.001, 0.05),
        ])
    if family == "bagging":
        return SearchSpace([
            categorical("base_estimator", ("knn", "rf")),
            uniform_int("n_estimators", 10, 300),
            uniform_real("max_features", 0.1, 1.0),
            uniform_real("max_samples", 0.1, 1.0),
            categorical("bootstrap", (True, False)),
            categorical("bootstrap_features", (False,)),
        ])
    if family == "ann":
        return SearchSpace(list(_NEURAL_DIMS))
    if family == "dnn":
        return SearchSpace(list(_NEURAL_DIMS) + [uniform_int("hidden_layers", 1, 8)])
    raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")
