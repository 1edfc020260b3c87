import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odtdemand.explain import (
    ShapMatrix,
    coalition_value,
    export_dependency,
    export_importance,
    export_summary,
    importance,
    select_background,
    shapley_exact,
    shapley_sampled,
    top_share,
)
from odtdemand.models import build_model


class Linear:
    """Per-class score w . x + c (same weights for every class)."""

    def __init__(self, w, c=0.0):
        self.w = np.asarray(w, dtype=float)
        self.c = c

    def predict_proba(self, X):
        s = np.asarray(X) @ self.w + self.c
        return np.stack([s, 2 * s, -s], axis=1)


class Product:
    """Nonlinear stub: class scores x0*x1, max(x2, x3), x0 + x3^2."""

    def predict_proba(self, X):
        X = np.asarray(X)
        return np.stack([X[:, 0] * X[:, 1], np.maximum(X[:, 2], X[:, 3]), X[:, 0] + X[:, 3] ** 2], axis=1)


def brute_force_shapley(f, x, background):
    """Average marginal contribution over all M! orderings (oracle)."""
    M = len(x)

    def v(S):
        rows = background.copy()
        rows[:, list(S)] = x[list(S)]
        return f(rows).mean(axis=0)

    phi = np.zeros((M, f(background[:1]).shape[1]))
    for perm in itertools.permutations(range(M)):
        S = []
        for j in perm:
            before = v(S)
            S.append(j)
            phi[j] += v(S) - before
    return phi / math.factorial(M)


def test_linear_closed_form():
    rng = np.random.default_rng(0)
    bg = rng.normal(size=(20, 2))
    x = np.array([[1.5, -0.5]])
    sm = shapley_exact(Linear([2.0, 3.0]), x, bg)
    m = bg.mean(axis=0)
    phi = np.array([2 * (1.5 - m[0]), 3 * (-0.5 - m[1])])
    assert np.allclose(sm.values[0, :, 0], phi, atol=1e-12)
    assert np.allclose(sm.values[0, :, 1], 2 * phi, atol=1e-12)


def test_matches_permutation_oracle():
    rng = np.random.default_rng(1)
    bg = rng.normal(size=(7, 4))
    X = rng.normal(size=(3, 4))
    sm = shapley_exact(Product(), X, bg)
    for i in range(3):
        assert np.allclose(sm.values[i], brute_force_shapley(Product().predict_proba, X[i], bg), atol=1e-12)


def test_coalition_value_extremes():
    rng = np.random.default_rng(2)
    bg = rng.normal(size=(5, 4))
    x = rng.normal(size=4)
    f = Product()
    assert np.allclose(coalition_value(f, x, bg, range(4)), f.predict_proba(x[None])[0])
    assert np.allclose(coalition_value(f, x, bg, []), f.predict_proba(bg).mean(axis=0))
    with pytest.raises(ValueError):
        coalition_value(f, x, np.zeros((0, 4)), [])


def test_constant_model_gives_zero():
    sm = shapley_exact(Linear([0, 0, 0], c=0.4), np.ones((2, 3)), np.zeros((4, 3)))
    assert np.all(sm.values == 0)


def test_symmetric_features_equal():
    # x0*x1 is symmetric in (x0, x1) when the background is closed under the swap
    bg = np.array([[0.0, 1.0, 0, 0], [1.0, 0.0, 0, 0]])
    sm = shapley_exact(Product(), [[2.0, 2.0, 0, 0]], bg)
    assert sm.values[0, 0, 0] == pytest.approx(sm.values[0, 1, 0], abs=1e-12)


@pytest.mark.parametrize("family,config", [
    ("rf", {"n_estimators": 10}),
    ("bagging", {"base_estimator": "knn", "n_estimators": 5, "max_features": 0.6}),
    ("ann", {"neurons_per_hidden": 6, "epochs": 20}),
    ("dnn", {"neurons_per_hidden": 6, "epochs": 20, "hidden_layers": 3, "output_activation": "sigmoid"}),
])
def test_efficiency_every_family(blobs, family, config):
    m = build_model(family, config, seed=0).fit(blobs)
    bg = select_background(blobs, 20, seed=0)
    sm = shapley_exact(m, blobs.features[::60], bg)
    assert np.abs(sm.reconstruct() - m.predict_proba(blobs.features[::60])).max() < 1e-8
    if family == "rf":
        assert np.all(sm.values[:, 7, :] == 0)


def test_dummy_for_mlp_with_zero_input_weights(blobs):
    m = build_model("ann", {"neurons_per_hidden": 5, "epochs": 5}).fit(blobs)
    (W1, _), *_ = m.net.weights()
    W1[2, :] = 0.0
    sm = shapley_exact(m, blobs.features[:5], select_background(blobs, 10))
    assert np.all(sm.values[:, 2, :] == 0)


def test_order_invariance():
    rng = np.random.default_rng(5)
    bg = rng.normal(size=(9, 4))
    X = rng.normal(size=(4, 4))
    a = shapley_exact(Product(), X, bg)
    b = shapley_exact(Product(), X[::-1], bg[::-1])
    assert np.allclose(a.values, b.values[::-1], atol=1e-12)


def test_too_many_features():
    with pytest.raises(ValueError, match="shapley_sampled"):
        shapley_exact(Linear(np.ones(17)), np.ones((1, 17)), np.zeros((2, 17)))


def test_sampled_enumerates_small_m():
    rng = np.random.default_rng(6)
    bg = rng.normal(size=(5, 2))
    X = rng.normal(size=(2, 2))
    f = Product()
    g = lambda A: f.predict_proba(np.c_[A, A])  # noqa: E731
    model = type("M", (), {"predict_proba": staticmethod(g)})
    exact = shapley_exact(model, X, bg)
    samp = shapley_sampled(model, X, bg, n_permutations=2)
    assert np.allclose(exact.values, samp.values, atol=1e-12)


def test_sampled_within_three_standard_errors():
    rng = np.random.default_rng(7)
    bg = rng.normal(size=(10, 8))
    X = rng.normal(size=(2, 8))
    w = rng.normal(size=8)

    class Nonlinear:
        def predict_proba(self, A):
            s = np.tanh(A @ w) + A[:, 0] * A[:, 1]
            return np.stack([s, s ** 2, -s], axis=1)

    exact = shapley_exact(Nonlinear(), X, bg)
    samp = shapley_sampled(Nonlinear(), X, bg, n_permutations=400, seed=1)
    z = np.abs(samp.values - exact.values) / np.maximum(samp.std_errors, 1e-12)
    # 3 standard errors covers all but a handful of the 48 values
    assert np.mean(z <= 3) >= 0.95
    again = shapley_sampled(Nonlinear(), X, bg, n_permutations=400, seed=1)
    assert np.array_equal(samp.values, again.values)


def _matrix(values, names=None):
    values = np.asarray(values, dtype=float)
    n, M, C = values.shape
    names = names or [f"f{j}" for j in range(M)]
    return ShapMatrix(values, np.zeros(C), 1, tuple((nm, "continuous") for nm in names),
                      np.arange(n * M, dtype=float).reshape(n, M))


def test_importance_zero_and_forced():
    assert importance(_matrix(np.zeros((2, 3, 3)))) == [("f0", 0.0), ("f1", 0.0), ("f2", 0.0)]
    v = np.zeros((2, 3, 3))
    v[:, 2, :] = -1.0
    ranked = importance(_matrix(v))
    assert ranked[0] == ("f2", 1.0)
    assert top_share(_matrix(v), ["f2"]) == 1.0


@settings(max_examples=25)
@given(st.integers(0, 10**6))
def test_importance_sorted(seed):
    v = np.random.default_rng(seed).normal(size=(3, 5, 3))
    scores = [s for _, s in importance(_matrix(v))]
    assert scores == sorted(scores, reverse=True)


def test_exports(tmp_path):
    v = np.random.default_rng(8).normal(size=(2, 3, 3))
    sm = _matrix(v)
    export_summary(sm, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    export_summary(sm, tmp_path / "s2.csv")
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    export_importance(sm, tmp_path / "i.csv")
    assert (tmp_path / "i.csv").read_text().startswith("rank,feature,mean_abs_shap\n1,")
    binary = np.array([[0.0, 5, 1], [1.0, 6, 2]])
    export_dependency(sm, binary, "f0", tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()[1:]
    assert {r.split(",")[0] for r in rows} == {"0.0", "1.0"}
    with pytest.raises(KeyError):
        export_dependency(sm, binary, "nope", tmp_path / "x.csv")
