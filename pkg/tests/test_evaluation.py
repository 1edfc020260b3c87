import numpy as np
import pytest
from hypothesis import given, strategies as st

from odtdemand.core import LabeledDataset
from odtdemand.evaluation import (
    FIXTURES,
    ConfusionMatrix,
    compare_models,
    confusion,
    fixture_report,
    overall_accuracy,
    per_class_accuracy,
    report_json,
    report_text,
    split,
)
from odtdemand.models import FAMILIES

META = (("x", "continuous"),)


def _dataset(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    return LabeledDataset(np.arange(len(y), dtype=float)[:, None], y, META)


def test_split_sizes_and_proportions():
    d = _dataset([50, 30, 20])
    tr, te = split(d, 0.2, seed=0)
    assert (len(tr), len(te)) == (80, 20)
    assert te.class_counts().tolist() == [10, 6, 4]
    tr2, te2 = split(d, 0.2, seed=0)
    assert np.array_equal(te.features, te2.features)


@given(st.lists(st.integers(0, 2), min_size=6, max_size=120), st.floats(0.05, 0.95), st.integers(0, 50))
def test_split_is_partition(labels, frac, seed):
    y = np.array(labels)
    counts = np.bincount(y, minlength=3)
    if counts[counts > 0].min() < 2:
        return
    d = LabeledDataset(np.arange(len(y), dtype=float)[:, None], y, META)
    tr, te = split(d, frac, seed)
    rows = np.concatenate([tr.features[:, 0], te.features[:, 0]])
    assert np.array_equal(np.sort(rows), np.arange(len(y)))
    assert len(te) == int(np.floor(frac * len(y) + 0.5))


def test_split_errors():
    with pytest.raises(ValueError, match="class 2"):
        split(_dataset([10, 10, 1]), 0.2)
    with pytest.raises(ValueError):
        split(_dataset([10, 10, 10]), 1.0)


def test_confusion_basics():
    assert np.array_equal(confusion([0, 1, 2], [0, 1, 2]).counts, np.eye(3))
    assert confusion([0, 1, 2], [1, 1, 1]).counts[:, 1].tolist() == [1, 1, 1]
    with pytest.raises(ValueError):
        confusion([0, 1], [0])
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1])


@pytest.mark.parametrize("name", ["table2", "table3"])
def test_fixture_rebuilt_from_label_lists(name):
    m = FIXTURES[name]
    t, p = [], []
    for a in range(3):
        for q in range(3):
            t += [a] * m[a, q]
            p += [q] * m[a, q]
    order = np.random.default_rng(0).permutation(len(t))
    cm = confusion(np.array(t)[order], np.array(p)[order])
    assert np.array_equal(cm.counts, m)


def test_published_accuracies():
    r2 = fixture_report("table2")
    assert r2["per_class"] == [73, 53, 65] and r2["overall"] == 64
    assert r2["overall_exact"] == pytest.approx(100 * 335 / 527)
    r3 = fixture_report("table3")
    assert r3["per_class"] == [95, 65, 63] and r3["overall"] == 72


def test_accuracy_edge_cases():
    assert per_class_accuracy(ConfusionMatrix(np.diag([3, 4, 5])))[1] == [100, 100, 100]
    assert overall_accuracy(ConfusionMatrix([[0, 2, 0], [1, 0, 0], [1, 0, 0]]))[1] == 0
    exact, rounded = per_class_accuracy(ConfusionMatrix([[1, 1, 0], [0, 0, 0], [0, 0, 2]]))
    assert exact[1] is None and rounded[1] is None
    with pytest.raises(ValueError):
        ConfusionMatrix([[-1, 0, 0], [0, 0, 0], [0, 0, 0]])


@given(st.lists(st.integers(0, 2), min_size=1, max_size=80), st.integers(0, 1000))
def test_overall_is_weighted_per_class(t, seed):
    t = np.array(t)
    p = np.random.default_rng(seed).integers(0, 3, len(t))
    cm = confusion(t, p)
    assert cm.row_sums.tolist() == np.bincount(t, minlength=3).tolist() and cm.total == len(t)
    exact, _ = per_class_accuracy(cm)
    weighted = sum(e * n / cm.total for e, n in zip(exact, cm.row_sums) if e is not None)
    assert abs(weighted - overall_accuracy(cm)[0]) < 1e-12


class Oracle:
    """Knows the label of every row of the full dataset, held-out rows included."""

    def fit(self, d):
        return self

    def predict(self, X):
        return np.array([FULL_LABELS[int(x)] for x in np.asarray(X)[:, 0]])


FULL_LABELS = np.repeat(np.arange(3), [30, 20, 10])


def test_oracle_family_wins():
    d = LabeledDataset(np.arange(60, dtype=float)[:, None], FULL_LABELS, META)
    r = compare_models(d, [("oracle", Oracle)])
    assert r["best"] == "oracle" and r["families"]["oracle"]["overall"] == 100


def test_failure_recorded_and_ties():
    d = LabeledDataset(np.arange(60, dtype=float)[:, None], FULL_LABELS, META)

    def broken():
        raise ValueError("boom")

    r = compare_models(d, [("zeta", Oracle), ("alpha", Oracle), ("bad", broken)])
    assert r["families"]["bad"]["status"] == "failed" and "boom" in r["families"]["bad"]["error"]
    assert r["best"] == "alpha"
    assert "failed" in report_text(r)


def test_all_families_on_blobs(blobs):
    configs = {"ann": {"neurons_per_hidden": 10, "epochs": 60}, "dnn": {"neurons_per_hidden": 10, "epochs": 60}}
    r = compare_models(blobs, FAMILIES, configs, seed=0)
    assert sorted(r["families"]) == sorted(FAMILIES)
    for name in FAMILIES:
        assert r["families"][name]["overall"] >= 90
    again = compare_models(blobs, FAMILIES, configs, seed=0)
    assert report_json(r) == report_json(again)
