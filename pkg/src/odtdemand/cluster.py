"""k-means, elbow selection and the count -> demand-level labeler."""

from __future__ import annotations

import bisect
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KMeansResult:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    distortion: float


def _as_points(points) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _sqdist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X, w, k, rng):
    n = len(X)
    centers = [X[rng.choice(n, p=w / w.sum())]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        p = w * d2
        # every remaining point coincides with a centre; only reachable with
        # fewer distinct points than k, which kmeans() rejects up front
        p = p / p.sum()
        c = X[rng.choice(n, p=p)]
        centers.append(c)
        d2 = np.minimum(d2, ((X - c) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(X, w, C, tol, max_iter):
    k = len(C)
    for _ in range(max_iter):
        d2 = _sqdist(X, C)
        assign = np.argmin(d2, axis=1)
        newC = C.copy()
        for j in range(k):
            members = assign == j
            wj = w[members]
            if wj.sum() > 0:
                newC[j] = (wj[:, None] * X[members]).sum(axis=0) / wj.sum()
            else:
                # empty cluster: move it to the worst-served point
                far = np.argmax(w * d2[np.arange(len(X)), assign])
                newC[j] = X[far]
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if shift < tol:
            break
    d2 = _sqdist(X, C)
    assign = np.argmin(d2, axis=1)
    distortion = float((w * d2[np.arange(len(X)), assign]).sum())
    return C, assign, distortion


def _hartigan(X, w, assign, k, max_pass=100):
    """Single-point transfers that lower the weighted SSE (Hartigan's rule).

    Moving point i (weight w_i) from cluster a to b changes the SSE by
    W_b w_i/(W_b + w_i) |x_i - c_b|^2 - W_a w_i/(W_a - w_i) |x_i - c_a|^2.
    A Hartigan-stable partition is also Lloyd-stable, so this only ever
    improves on Lloyd's fixed point.
    """
    assign = assign.copy()
    W = np.array([w[assign == j].sum() for j in range(k)])
    C = np.array([(w[assign == j, None] * X[assign == j]).sum(axis=0) / W[j] if W[j] > 0 else X[0]
                  for j in range(k)])
    for _ in range(max_pass):
        moved = False
        for i in range(len(X)):
            a = assign[i]
            if W[a] <= w[i]:
                continue
            d = ((X[i] - C) ** 2).sum(axis=1)
            leave = W[a] * w[i] / (W[a] - w[i]) * d[a]
            join = np.where(W > 0, W * w[i] / (W + w[i]) * d, 0.0)
            join[a] = np.inf
            b = int(np.argmin(join))
            if join[b] < leave - 1e-12:
                C[a] = (W[a] * C[a] - w[i] * X[i]) / (W[a] - w[i])
                C[b] = (W[b] * C[b] + w[i] * X[i]) / (W[b] + w[i])
                W[a] -= w[i]
                W[b] += w[i]
                assign[i] = b
                moved = True
        if not moved:
            break
    return C


def kmeans(points, k, seed=0, restarts=10, tol=1e-6, max_iter=300, weights=None, refine=True) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.

    With `refine`, each converged restart is polished by Hartigan single-point
    transfers and Lloyd is run again from the result; plain Lloyd gets stuck
    in poor local optima on roughly 1 in 70 small 1-D instances.

    `weights` gives each point a multiplicity (e.g. the frequency of a count
    value); clustering weighted distinct values is equivalent to clustering the
    expanded list. In 1-D the returned centroids are sorted ascending.
    """
    X = _as_points(points)
    if k < 1:
        raise ValueError("k must be positive")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != len(X):
        raise ValueError("weights must match points")
    n_distinct = len(np.unique(X[w > 0], axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the number of distinct points ({n_distinct})")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        C0 = _kmeanspp(X, w, k, rng)
        C, assign, dist = _lloyd(X, w, C0, tol, max_iter)
        if refine and k > 1:
            C, assign, dist = _lloyd(X, w, _hartigan(X, w, assign, k), tol, max_iter)
        if best is None or dist < best[2]:
            best = (C, assign, dist)
    C, assign, dist = best

    if X.shape[1] == 1:
        order = np.argsort(C[:, 0], kind="stable")
        rank = np.empty(k, dtype=int)
        rank[order] = np.arange(k)
        C = C[order, 0]
        assign = rank[assign]
    return KMeansResult(k=k, centroids=C, assignment=assign, distortion=dist)


def find_elbow(distortions) -> int:
    """Pick k from a distortion curve D(1..k_max).

    Both axes are normalised to [0, 1] and the knee is the interior point with
    the largest perpendicular distance to the chord from the first to the last
    point. Returns 1 (with a warning) for a flat curve.
    """
    D = np.asarray(distortions, dtype=float)
    k_max = len(D)
    if k_max < 3:
        raise ValueError("need a curve over at least k = 1..3")
    span = D.max() - D.min()
    if D[0] == D[-1] or span == 0:
        warnings.warn("flat distortion curve; no elbow, returning k=1", RuntimeWarning, stacklevel=2)
        return 1
    ks = np.arange(1, k_max + 1, dtype=float)
    x = (ks - 1) / (k_max - 1)
    y = (D - D.min()) / span
    p0 = np.array([x[0], y[0]])
    chord = np.array([x[-1], y[-1]]) - p0
    rel = np.stack([x, y], axis=1) - p0
    dist = np.abs(chord[0] * rel[:, 1] - chord[1] * rel[:, 0]) / np.hypot(*chord)
    inner = dist[1:-1]
    return int(np.argmax(inner)) + 2


def distortion_curve(points, k_max, weights=None, **kmeans_params) -> np.ndarray:
    return np.array(
        [kmeans(points, k, weights=weights, **kmeans_params).distortion for k in range(1, k_max + 1)]
    )


def elbow(points, k_max=10, weights=None, **kmeans_params):
    """Return ``(optimal_k, distortions)`` with distortions for k = 1..k_max."""
    if k_max < 3:
        raise ValueError("k_max must be at least 3")
    curve = distortion_curve(points, k_max, weights=weights, **kmeans_params)
    return find_elbow(curve), curve


def count_frequencies(counts):
    """Distinct count values and their frequencies, ascending."""
    values, freq = np.unique(np.asarray(counts, dtype=np.int64), return_counts=True)
    return values, freq


@dataclass(frozen=True)
class DemandLabeler:
    """Integer thresholds t1 < t2 < ...; level i covers (t_i, t_{i+1}]."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(t) for t in self.boundaries)
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly ascending, got {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_levels(self) -> int:
        return len(self.boundaries) + 1

    def __call__(self, count) -> int:
        return label(self, count)

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, doc) -> "DemandLabeler":
        return cls(tuple(doc["boundaries"]))


def label(labeler: DemandLabeler, count) -> int:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return bisect.bisect_left(labeler.boundaries, count)


def fit_labeler(counts, k=3, seed=0, restarts=10, tol=1e-6, max_iter=300) -> DemandLabeler:
    """Cluster the count distribution and snap thresholds to cluster maxima."""
    values, freq = count_frequencies(counts)
    if len(values) == 0:
        raise ValueError("counts must be nonempty")
    if len(values) < k:
        raise ValueError(f"need at least {k} distinct counts, got {len(values)}")
    res = kmeans(values, k, seed=seed, restarts=restarts, tol=tol, max_iter=max_iter, weights=freq)
    if len(np.unique(res.assignment)) < k:
        raise RuntimeError(f"k-means left an empty cluster for k={k}")
    bounds = [int(values[res.assignment == j].max()) for j in range(k - 1)]
    return DemandLabeler(tuple(bounds))
