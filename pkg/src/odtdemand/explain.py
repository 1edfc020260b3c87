"""Interventional Shapley values over a background set, plus CSV exports.

Coalition values use the model's class probabilities: v(S) is the mean
prediction over background rows whose features in S are replaced by the
explained instance's values.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import LEVEL_NAMES, LabeledDataset, as_matrix

MAX_EXACT_FEATURES = 16
DEFAULT_BACKGROUND = 100
# hybrid rows evaluated per predict_proba call
_CHUNK_ROWS = 1 << 16


@dataclass
class ShapMatrix:
    """values[i, j, c]: attribution of feature j to class c for instance i."""

    values: np.ndarray
    base_values: np.ndarray
    background_size: int
    feature_meta: tuple
    instances: np.ndarray
    std_errors: np.ndarray | None = None

    @property
    def feature_names(self):
        return [name for name, _ in self.feature_meta]

    def reconstruct(self) -> np.ndarray:
        """Base value plus summed attributions, one row per instance."""
        return self.values.sum(axis=1) + self.base_values


def select_background(d, size=DEFAULT_BACKGROUND, seed=0) -> np.ndarray:
    """Up to `size` rows drawn without replacement (in original row order)."""
    X = d.features if isinstance(d, LabeledDataset) else as_matrix(d)
    if len(X) == 0:
        raise ValueError("background must be nonempty")
    if len(X) <= size:
        return X.copy()
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(len(X), size=size, replace=False))]


def _hybrids(instance, background, masks, M):
    """Rows for each mask: background rows with masked features from `instance`."""
    bits = ((masks[:, None] >> np.arange(M)) & 1).astype(bool)
    rows = np.repeat(background[None, :, :], len(masks), axis=0)
    rows = np.where(bits[:, None, :], instance[None, None, :], rows)
    return rows.reshape(-1, M)


def _coalition_values(model, instance, background, masks):
    """Mean predict_proba over the background for each coalition mask."""
    M = background.shape[1]
    B = len(background)
    masks = np.asarray(masks, dtype=np.int64)
    per_call = max(1, _CHUNK_ROWS // B)
    out = []
    for start in range(0, len(masks), per_call):
        chunk = masks[start:start + per_call]
        P = model.predict_proba(_hybrids(instance, background, chunk, M))
        out.append(P.reshape(len(chunk), B, -1).mean(axis=1))
    return np.concatenate(out)


def coalition_value(model, instance, background, S) -> np.ndarray:
    background = as_matrix(background)
    if len(background) == 0:
        raise ValueError("background must be nonempty")
    instance = np.asarray(instance, dtype=float).ravel()
    mask = 0
    for j in S:
        mask |= 1 << int(j)
    return _coalition_values(model, instance, background, [mask])[0]


def _shapley_weights(M):
    # weight for a coalition of size s not containing the feature
    return np.array([math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) for s in range(M)])


def _popcount(masks):
    c = np.zeros_like(masks)
    m = masks.copy()
    while m.any():
        c += m & 1
        m >>= 1
    return c


def _prepare(instances, background, max_background, seed):
    X = instances.features if isinstance(instances, LabeledDataset) else as_matrix(instances)
    meta = instances.feature_meta if isinstance(instances, LabeledDataset) else None
    bg = background.features if isinstance(background, LabeledDataset) else as_matrix(background)
    if meta is None and isinstance(background, LabeledDataset):
        meta = background.feature_meta
    if len(bg) == 0:
        raise ValueError("background must be nonempty")
    if max_background is not None and len(bg) > max_background:
        bg = select_background(bg, max_background, seed)
    if X.shape[1] != bg.shape[1]:
        raise ValueError("instances and background differ in width")
    M = X.shape[1]
    if meta is None:
        meta = tuple((f"x{j}", "continuous") for j in range(M))
    return np.asarray(X, dtype=float), np.asarray(bg, dtype=float), tuple(meta)


def shapley_exact(model, instances, background, seed=0, max_background=DEFAULT_BACKGROUND) -> ShapMatrix:
    """Exact Shapley values by enumerating all 2^M coalitions per instance."""
    X, bg, meta = _prepare(instances, background, max_background, seed)
    M = X.shape[1]
    if M > MAX_EXACT_FEATURES:
        raise ValueError(f"{M} features exceed the exact limit of {MAX_EXACT_FEATURES}; use shapley_sampled")
    masks = np.arange(1 << M, dtype=np.int64)
    size = _popcount(masks)
    w = _shapley_weights(M)
    base = model.predict_proba(bg).mean(axis=0)
    values = np.zeros((len(X), M, len(base)))
    for i, x in enumerate(X):
        v = _coalition_values(model, x, bg, masks)
        for j in range(M):
            without = masks[(masks >> j) & 1 == 0]
            values[i, j] = (w[size[without]][:, None] * (v[without | (1 << j)] - v[without])).sum(axis=0)
    return ShapMatrix(values, base, len(bg), meta, X.copy())


def shapley_sampled(model, instances, background, n_permutations=100, seed=0,
                    max_background=DEFAULT_BACKGROUND) -> ShapMatrix:
    """Permutation-sampling estimate with per-value standard errors.

    When `n_permutations` is at least M!, every permutation is enumerated
    once and the result is exact.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    X, bg, meta = _prepare(instances, background, max_background, seed)
    M = X.shape[1]
    rng = np.random.default_rng(seed)
    if M <= 10 and n_permutations >= math.factorial(M):
        perms = [np.array(p) for p in itertools.permutations(range(M))]
    else:
        perms = [rng.permutation(M) for _ in range(n_permutations)]
    base = model.predict_proba(bg).mean(axis=0)

    # prefix masks of every permutation, evaluated once per instance
    prefix = np.zeros((len(perms), M + 1), dtype=np.int64)
    for r, p in enumerate(perms):
        for t, j in enumerate(p):
            prefix[r, t + 1] = prefix[r, t] | (1 << int(j))
    unique, inverse = np.unique(prefix, return_inverse=True)
    inverse = inverse.reshape(prefix.shape)

    values = np.zeros((len(X), M, len(base)))
    errors = np.zeros_like(values)
    for i, x in enumerate(X):
        v = _coalition_values(model, x, bg, unique)
        marg = np.zeros((len(perms), M, len(base)))
        for r, p in enumerate(perms):
            vr = v[inverse[r]]
            marg[r, p] = vr[1:] - vr[:-1]
        values[i] = marg.mean(axis=0)
        if len(perms) > 1:
            errors[i] = marg.std(axis=0, ddof=1) / math.sqrt(len(perms))
        else:
            errors[i] = np.nan
    return ShapMatrix(values, base, len(bg), meta, X.copy(), std_errors=errors)


def importance(sm: ShapMatrix):
    """[(feature, mean |phi| over instances and classes)], descending; ties by index."""
    if sm.values.size == 0:
        raise ValueError("empty Shapley matrix")
    scores = np.abs(sm.values).mean(axis=(0, 2))
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    names = sm.feature_names
    return [(names[j], float(scores[j])) for j in order]


def top_share(sm: ShapMatrix, features) -> float:
    """Fraction of total mean |phi| carried by the named features."""
    ranked = dict(importance(sm))
    total = sum(ranked.values())
    return sum(ranked[f] for f in features) / total if total > 0 else 0.0


def _class_names(n):
    return list(LEVEL_NAMES[:n]) if n <= len(LEVEL_NAMES) else [str(c) for c in range(n)]


def export_importance(sm: ShapMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_shap"])
        for r, (name, score) in enumerate(importance(sm), 1):
            w.writerow([r, name, repr(score)])


def export_summary(sm: ShapMatrix, path):
    """One row per (instance, feature) with per-class attributions."""
    classes = _class_names(sm.values.shape[2])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "feature"] + [f"shap_{c}" for c in classes] + ["feature_value"])
        for i in range(sm.values.shape[0]):
            for j, name in enumerate(sm.feature_names):
                w.writerow([i, name] + [repr(float(v)) for v in sm.values[i, j]]
                           + [repr(float(sm.instances[i, j]))])


def export_dependency(sm: ShapMatrix, dataset, feature, path):
    """(feature value, shap value, class) rows for one feature.

    `dataset` supplies the feature values aligned with the explained
    instances (a LabeledDataset or matrix); None uses the stored instances.
    """
    names = sm.feature_names
    if feature not in names:
        raise KeyError(f"unknown feature {feature!r}")
    j = names.index(feature)
    if dataset is None:
        X = sm.instances
    else:
        X = dataset.features if isinstance(dataset, LabeledDataset) else as_matrix(dataset)
    if len(X) != sm.values.shape[0]:
        raise ValueError("dataset rows must align with the explained instances")
    classes = _class_names(sm.values.shape[2])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_value", "shap_value", "class"])
        for i in range(len(X)):
            for c, cname in enumerate(classes):
                w.writerow([repr(float(X[i, j])), repr(float(sm.values[i, j, c])), cname])
