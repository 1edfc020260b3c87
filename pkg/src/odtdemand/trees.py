"""CART trees, random forests, bagging and k-nearest neighbours.

Hot loops (node splitting, tree traversal, neighbour search) are compiled with
numba; everything else is plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Union

import numpy as np
from numba import njit

from .core import N_CLASSES, Classifier, LabeledDataset, ScalerState, as_matrix, fit_scaler

GINI, ENTROPY = 0, 1
_CRITERIA = {"gini": GINI, "entropy": ENTROPY}
_TIE_EPS = 1e-12


def resolve_count(value, n, name="value"):
    """Fractions (float in (0, 1]) become ceil(value * n); ints pass through."""
    if isinstance(value, bool):
        raise TypeError(f"{name} must be a count or a fraction")
    if isinstance(value, (int, np.integer)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
        return int(value)
    value = float(value)
    if not 0 < value <= 1:
        raise ValueError(f"{name} fraction must lie in (0, 1], got {value}")
    return max(1, math.ceil(value * n))


def resolve_max_features(value, n_features):
    if value in (None, "all"):
        return n_features
    if value == "sqrt":
        return max(1, int(math.floor(math.sqrt(n_features))))
    if value == "log2":
        return max(1, int(math.floor(math.log2(n_features))))
    return min(n_features, resolve_count(value, n_features, "max_features"))


def impurity(class_counts, criterion="gini") -> float:
    counts = np.asarray(class_counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise ValueError("impurity of an empty node is undefined")
    p = counts / total
    if criterion == "gini":
        return float(1.0 - (p**2).sum())
    if criterion == "entropy":
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())
    raise ValueError(f"unknown criterion {criterion!r}")


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _imp(counts, total, criterion):
    if total <= 0:
        return 0.0
    if criterion == GINI:
        s = 0.0
        for c in range(counts.shape[0]):
            p = counts[c] / total
            s += p * p
        return 1.0 - s
    s = 0.0
    for c in range(counts.shape[0]):
        if counts[c] > 0:
            p = counts[c] / total
            s -= p * np.log2(p)
    return s


@njit(cache=True)
def _grow(X, y, n_classes, criterion, max_depth, max_features, min_leaf, min_split, seed):
    np.random.seed(seed)
    n, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, n_classes))
    gain_out = np.zeros(cap)

    idx = np.arange(n)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    feats = np.arange(p)
    cand = np.empty(p, dtype=np.int64)
    lc = np.zeros(n_classes)
    rc = np.zeros(n_classes)
    vals = np.empty(n)
    ys = np.empty(n, dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        m = end - start
        for c in range(n_classes):
            value[node, c] = 0.0
        for i in range(start, end):
            value[node, y[idx[i]]] += 1.0
        node_imp = _imp(value[node], float(m), criterion)

        if (max_depth >= 0 and depth >= max_depth) or m < min_split or m < 2 * min_leaf or node_imp <= 0.0:
            continue

        # candidate features: seeded subset redrawn per node, scanned in index order
        if max_features < p:
            for i in range(p):
                feats[i] = i
            for i in range(max_features):
                j = np.random.randint(i, p)
                t = feats[i]
                feats[i] = feats[j]
                feats[j] = t
            for i in range(max_features):
                cand[i] = feats[i]
            cand[:max_features] = np.sort(cand[:max_features])
            n_cand = max_features
        else:
            for i in range(p):
                cand[i] = i
            n_cand = p

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        for ci in range(n_cand):
            f = cand[ci]
            for i in range(m):
                vals[i] = X[idx[start + i], f]
                ys[i] = y[idx[start + i]]
            order = np.argsort(vals[:m], kind="mergesort")
            for c in range(n_classes):
                lc[c] = 0.0
                rc[c] = value[node, c]
            for i in range(m - 1):
                cls = ys[order[i]]
                lc[cls] += 1.0
                rc[cls] -= 1.0
                v0 = vals[order[i]]
                v1 = vals[order[i + 1]]
                if v1 <= v0:
                    continue
                nl = i + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                g = node_imp - (nl / m) * _imp(lc, float(nl), criterion) - (nr / m) * _imp(rc, float(nr), criterion)
                if g > best_gain + 1e-12:
                    best_gain = g
                    best_f = f
                    thr = 0.5 * (v0 + v1)
                    if thr >= v1:
                        thr = v0
                    best_thr = thr

        if best_f < 0:
            continue

        # partition idx[start:end] so rows with x <= thr come first
        i = start
        j = end - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                t = idx[i]
                idx[i] = idx[j]
                idx[j] = t
                j -= 1
        mid = i
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lnode
        right[node] = rnode
        gain_out[node] = best_gain

        stack_node[top] = rnode
        stack_start[top] = mid
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        gain_out[:n_nodes].copy(),
    )


@njit(cache=True)
def _traverse(X, feature, threshold, left, right, proba, roots):
    n = X.shape[0]
    n_trees = roots.shape[0]
    out = np.zeros((n, proba.shape[1]))
    for r in range(n):
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(proba.shape[1]):
                out[r, c] += proba[node, c]
    for r in range(n):
        for c in range(proba.shape[1]):
            out[r, c] /= n_trees
    return out


@njit(cache=True)
def _knn_proba(Q, T, y, k, n_classes):
    nq = Q.shape[0]
    nt, p = T.shape
    out = np.zeros((nq, n_classes))
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(nq):
        filled = 0
        for t in range(nt):
            d = 0.0
            for j in range(p):
                diff = Q[q, j] - T[t, j]
                d += diff * diff
            if filled < k:
                pos = filled
                filled += 1
            elif d < best_d[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion keeps (distance, index) order; equal distances keep the earlier row
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = t
        for i in range(k):
            out[q, y[best_i[i]]] += 1.0 / k
    return out


# --------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class TreeConfig:
    criterion: str = "gini"
    max_depth: int | None = None
    max_features: Union[str, float, int] = "all"
    min_samples_leaf: Union[int, float] = 1
    min_samples_split: Union[int, float] = 2
    seed: int = 0

    def __post_init__(self):
        if self.criterion not in _CRITERIA:
            raise ValueError(f"criterion must be gini or entropy, got {self.criterion!r}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative or None")
        if isinstance(self.max_features, float) and not 0 < self.max_features <= 1:
            raise ValueError("max_features fraction must lie in (0, 1]")
        for name in ("min_samples_leaf", "min_samples_split"):
            v = getattr(self, name)
            if isinstance(v, float) and not 0 < v <= 1:
                raise ValueError(f"{name} fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    tree: TreeConfig = field(default_factory=lambda: TreeConfig(max_features="sqrt"))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    scaling: str = "minmax"

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")


@dataclass(frozen=True)
class BaggingConfig:
    base: Union[KnnConfig, TreeConfig, ForestConfig] = field(default_factory=TreeConfig)
    n_estimators: int = 10
    max_features: float = 1.0
    max_samples: float = 1.0
    bootstrap: bool = True
    bootstrap_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        for name in ("max_features", "max_samples"):
            v = getattr(self, name)
            if isinstance(v, float) and not 0 < v <= 1:
                raise ValueError(f"{name} fraction must lie in (0, 1]")


def config_to_dict(cfg) -> dict:
    if isinstance(cfg, TreeConfig):
        return {"type": "tree", **asdict(cfg)}
    if isinstance(cfg, ForestConfig):
        return {"type": "forest", "n_estimators": cfg.n_estimators, "tree": config_to_dict(cfg.tree),
                "bootstrap": cfg.bootstrap, "seed": cfg.seed}
    if isinstance(cfg, KnnConfig):
        return {"type": "knn", "k": cfg.k, "scaling": cfg.scaling}
    if isinstance(cfg, BaggingConfig):
        doc = asdict(cfg)
        doc["base"] = config_to_dict(cfg.base)
        return {"type": "bagging", **doc}
    raise TypeError(f"not a tree-family config: {cfg!r}")


def config_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("type")
    if kind == "tree":
        return TreeConfig(**doc)
    if kind == "forest":
        doc["tree"] = config_from_dict(doc["tree"])
        return ForestConfig(**doc)
    if kind == "knn":
        return KnnConfig(**doc)
    if kind == "bagging":
        doc["base"] = config_from_dict(doc["base"])
        return BaggingConfig(**doc)
    raise ValueError(f"unknown config type {kind!r}")


# --------------------------------------------------------------------------
# models


class DecisionTree(Classifier):
    """Single CART tree; `nodes` arrays are indexed by node id, root = 0."""

    def __init__(self, cfg: TreeConfig | None = None):
        self.cfg = cfg or TreeConfig()
        self.seed = self.cfg.seed

    def _fit(self, d: LabeledDataset):
        X = np.ascontiguousarray(d.features, dtype=float)
        y = np.ascontiguousarray(d.labels, dtype=np.int64)
        n, p = X.shape
        if n == 0:
            raise ValueError("cannot fit a tree on an empty dataset")
        cfg = self.cfg
        min_leaf = resolve_count(cfg.min_samples_leaf, n, "min_samples_leaf")
        min_split = max(2, resolve_count(cfg.min_samples_split, n, "min_samples_split"))
        max_feat = resolve_max_features(cfg.max_features, p)
        depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
        out = _grow(X, y, N_CLASSES, _CRITERIA[cfg.criterion], depth, max_feat, min_leaf, min_split,
                    int(self.seed) % (2**32))
        self.feature, self.threshold, self.left, self.right, self.counts, self.split_gain = out
        self.n_features = p
        self.min_leaf = min_leaf
        self._finalize()

    def _finalize(self):
        totals = self.counts.sum(axis=1, keepdims=True)
        self.proba = np.where(totals > 0, self.counts / np.where(totals > 0, totals, 1), 1.0 / N_CLASSES)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def used_features(self) -> set:
        return set(int(f) for f in self.feature if f >= 0)

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(as_matrix(X))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _traverse(X, self.feature, self.threshold, self.left, self.right, self.proba,
                         np.zeros(1, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "family": "tree",
            "config": config_to_dict(self.cfg),
            "seed": self.seed,
            "n_features": self.n_features,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "DecisionTree":
        m = cls(config_from_dict(doc["config"]))
        m.seed = doc["seed"]
        m.n_features = doc["n_features"]
        m.feature = np.asarray(doc["feature"], dtype=np.int64)
        m.threshold = np.asarray(doc["threshold"], dtype=float)
        m.left = np.asarray(doc["left"], dtype=np.int64)
        m.right = np.asarray(doc["right"], dtype=np.int64)
        m.counts = np.asarray(doc["counts"], dtype=float).reshape(-1, N_CLASSES)
        m._finalize()
        return m


def _spawn(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed) % (2**63)).spawn(n)]


class RandomForest(Classifier):
    """Bootstrap ensemble of trees with per-node feature subsets."""

    def __init__(self, cfg: ForestConfig | None = None):
        self.cfg = cfg or ForestConfig()
        self.seed = self.cfg.seed

    def _sample_rows(self, rng, n):
        if self.cfg.bootstrap:
            return rng.integers(0, n, size=n)
        return np.arange(n)

    def _fit(self, d: LabeledDataset):
        n = len(d)
        self.trees = []
        for rng in _spawn(self.seed, self.cfg.n_estimators):
            rows = self._sample_rows(rng, n)
            tree_seed = int(rng.integers(0, 2**31 - 1))
            t = DecisionTree(self.cfg.tree)
            t.fit(d.subset(rows), seed=tree_seed)
            self.trees.append(t)
        self.n_features = d.n_features
        self._pack()

    def _pack(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        self._roots = offsets[:-1].astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
        self._right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
        self._proba = np.concatenate([t.proba for t in self.trees])

    def used_features(self) -> set:
        return set().union(*(t.used_features() for t in self.trees))

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(as_matrix(X))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _traverse(X, self._feature, self._threshold, self._left, self._right, self._proba, self._roots)

    def to_dict(self) -> dict:
        return {
            "family": "forest",
            "config": config_to_dict(self.cfg),
            "seed": self.seed,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc) -> "RandomForest":
        m = cls(config_from_dict(doc["config"]))
        m.seed = doc["seed"]
        m.n_features = doc["n_features"]
        m.trees = [DecisionTree.from_dict(t) for t in doc["trees"]]
        m._pack()
        return m


class KNearestNeighbors(Classifier):
    """k-NN on min-max scaled continuous features (bounds from training data)."""

    def __init__(self, k: int = 5, scaling: str = "minmax"):
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        self.k = int(k)
        self.scaling = scaling

    def _fit(self, d: LabeledDataset):
        if self.k > len(d):
            raise ValueError(f"k={self.k} exceeds the training sample size {len(d)}")
        self.scaler = fit_scaler(d.features, d.feature_kinds, self.scaling)
        self.train_X = np.ascontiguousarray(self.scaler.transform(d.features))
        self.train_y = np.ascontiguousarray(d.labels, dtype=np.int64)

    def predict_proba(self, X) -> np.ndarray:
        Q = np.ascontiguousarray(self.scaler.transform(as_matrix(X)))
        if Q.shape[1] != self.train_X.shape[1]:
            raise ValueError(f"expected {self.train_X.shape[1]} features, got {Q.shape[1]}")
        return _knn_proba(Q, self.train_X, self.train_y, self.k, N_CLASSES)

    def to_dict(self) -> dict:
        return {
            "family": "knn",
            "k": self.k,
            "scaler": self.scaler.to_dict(),
            "train_X": self.train_X.tolist(),
            "train_y": self.train_y.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "KNearestNeighbors":
        m = cls(doc["k"], doc["scaler"]["kind"])
        m.scaler = ScalerState.from_dict(doc["scaler"])
        m.train_X = np.ascontiguousarray(doc["train_X"], dtype=float)
        m.train_y = np.asarray(doc["train_y"], dtype=np.int64)
        return m


def _make_base(cfg, seed):
    if isinstance(cfg, KnnConfig):
        return KNearestNeighbors(cfg.k, cfg.scaling)
    if isinstance(cfg, TreeConfig):
        m = DecisionTree(cfg)
    elif isinstance(cfg, ForestConfig):
        m = RandomForest(cfg)
    else:
        raise TypeError(f"unsupported base estimator config {cfg!r}")
    m.seed = seed
    return m


_BASE_LOADERS = {"tree": DecisionTree, "forest": RandomForest, "knn": KNearestNeighbors}


class Bagging(Classifier):
    """Bootstrap aggregation over a pluggable base estimator.

    Each estimator sees a row sample and a column subset drawn once; at
    prediction time it is applied to its own columns and probabilities are
    averaged.
    """

    def __init__(self, cfg: BaggingConfig | None = None):
        self.cfg = cfg or BaggingConfig()
        self.seed = self.cfg.seed

    def _fit(self, d: LabeledDataset):
        cfg = self.cfg
        n, p = d.features.shape
        n_rows = min(n, resolve_count(cfg.max_samples, n, "max_samples")) if not cfg.bootstrap else \
            resolve_count(cfg.max_samples, n, "max_samples")
        n_cols = min(p, resolve_count(cfg.max_features, p, "max_features"))
        if isinstance(cfg.base, KnnConfig) and cfg.base.k > n_rows:
            raise ValueError(f"k={cfg.base.k} exceeds the per-estimator sample size {n_rows}")
        self.estimators = []
        self.columns = []
        for rng in _spawn(self.seed, cfg.n_estimators):
            if cfg.bootstrap:
                rows = np.sort(rng.integers(0, n, size=n_rows))
            else:
                rows = np.sort(rng.choice(n, size=n_rows, replace=False))
            if cfg.bootstrap_features:
                cols = np.sort(rng.integers(0, p, size=n_cols))
            else:
                cols = np.sort(rng.choice(p, size=n_cols, replace=False))
            base_seed = int(rng.integers(0, 2**31 - 1))
            sub = LabeledDataset(d.features[np.ix_(rows, cols)], d.labels[rows],
                                 tuple(d.feature_meta[c] for c in cols))
            est = _make_base(cfg.base, base_seed)
            est.fit(sub)
            self.estimators.append(est)
            self.columns.append(cols)
        self.n_features = p

    def predict_proba(self, X) -> np.ndarray:
        X = as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        total = np.zeros((X.shape[0], N_CLASSES))
        for est, cols in zip(self.estimators, self.columns):
            total += est.predict_proba(X[:, cols])
        return total / len(self.estimators)

    def used_features(self) -> set:
        used = set()
        for est, cols in zip(self.estimators, self.columns):
            if hasattr(est, "used_features"):
                used |= {int(cols[f]) for f in est.used_features()}
            else:
                used |= {int(c) for c in cols}
        return used

    def to_dict(self) -> dict:
        return {
            "family": "bagging",
            "config": config_to_dict(self.cfg),
            "seed": self.seed,
            "n_features": self.n_features,
            "columns": [c.tolist() for c in self.columns],
            "estimators": [e.to_dict() for e in self.estimators],
        }

    @classmethod
    def from_dict(cls, doc) -> "Bagging":
        m = cls(config_from_dict(doc["config"]))
        m.seed = doc["seed"]
        m.n_features = doc["n_features"]
        m.columns = [np.asarray(c, dtype=np.int64) for c in doc["columns"]]
        m.estimators = [_BASE_LOADERS[e["family"]].from_dict(e) for e in doc["estimators"]]
        return m


def fit_tree(d: LabeledDataset, cfg: TreeConfig | None = None) -> DecisionTree:
    return DecisionTree(cfg).fit(d)


def fit_forest(d: LabeledDataset, cfg: ForestConfig | None = None) -> RandomForest:
    return RandomForest(cfg).fit(d)


def fit_bagging(d: LabeledDataset, cfg: BaggingConfig | None = None) -> Bagging:
    return Bagging(cfg).fit(d)


def fit_knn(d: LabeledDataset, k: int = 5, scaling: str = "minmax") -> KNearestNeighbors:
    return KNearestNeighbors(k, scaling).fit(d)
