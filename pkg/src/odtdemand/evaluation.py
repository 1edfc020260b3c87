"""Train/test splitting, confusion matrices, accuracies and model comparison."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import LEVEL_NAMES, N_CLASSES, LabeledDataset
from .models import FAMILIES, build_model

# confusion matrices of the published production (Bagging) and distribution (RF) models
FIXTURES = {
    "table2": np.array([[166, 54, 6], [78, 114, 24], [1, 29, 55]]),
    "table3": np.array([[107, 3, 3], [32, 109, 27], [14, 44, 98]]),
}


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(d: LabeledDataset, test_fraction=0.2, seed=0):
    """Stratified split; test size round(fraction * n) apportioned by largest remainder."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    y = d.labels
    classes, counts = np.unique(y, return_counts=True)
    for c, n in zip(classes, counts):
        if n < 2:
            raise ValueError(f"class {int(c)} has {n} row(s); need at least 2 to split")
    n_test = round_half_up(test_fraction * len(y))
    quota = counts * n_test / len(y)
    take = np.floor(quota).astype(int)
    remainder = quota - take
    for i in sorted(range(len(classes)), key=lambda i: (-remainder[i], i))[: n_test - take.sum()]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    test = []
    for c, t in zip(classes, take):
        test.append(rng.permutation(np.flatnonzero(y == c))[:t])
    test = np.sort(np.concatenate(test)) if test else np.array([], dtype=int)
    train = np.setdiff1d(np.arange(len(y)), test, assume_unique=True)
    return d.subset(train), d.subset(test)


def split_indices(d: LabeledDataset, test_fraction=0.2, seed=0):
    """Row indices of :func:`split`'s parts."""
    marked = LabeledDataset(np.arange(len(d), dtype=float)[:, None], d.labels, (("row", "discrete"),))
    tr, te = split(marked, test_fraction, seed)
    return tr.features[:, 0].astype(int), te.features[:, 0].astype(int)


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[a][p]: rows are actual levels, columns predicted levels."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES) or (c < 0).any():
            raise ValueError("confusion counts must be a non-negative 3x3 matrix")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["actual"] + [f"pred_{n}" for n in LEVEL_NAMES])
            for name, row in zip(LEVEL_NAMES, self.counts):
                w.writerow([name] + [int(v) for v in row])


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {len(t)} true vs {len(p)} predicted labels")
    if len(t) and (t.min() < 0 or t.max() >= N_CLASSES or p.min() < 0 or p.max() >= N_CLASSES):
        raise ValueError("labels must lie in {0, 1, 2}")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def per_class_accuracy(cm: ConfusionMatrix):
    """Row-wise recall in percent: ``(exact, rounded)``; empty rows give None."""
    exact, rounded = [], []
    for a in range(N_CLASSES):
        n = cm.row_sums[a]
        if n == 0:
            exact.append(None)
            rounded.append(None)
        else:
            v = 100.0 * cm.counts[a, a] / n
            exact.append(v)
            rounded.append(round_half_up(v))
    return exact, rounded


def overall_accuracy(cm: ConfusionMatrix):
    """``(exact percent, rounded percent)``."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    v = 100.0 * np.trace(cm.counts) / cm.total
    return v, round_half_up(v)


def fixture_report(name) -> dict:
    cm = ConfusionMatrix(FIXTURES[name])
    exact, rounded = per_class_accuracy(cm)
    oe, orr = overall_accuracy(cm)
    return {
        "fixture": name,
        "confusion": cm.counts.tolist(),
        "per_class_exact": exact,
        "per_class": rounded,
        "overall_exact": oe,
        "overall": orr,
    }


def evaluate_model(model, test: LabeledDataset) -> dict:
    cm = confusion(test.labels, model.predict(test.features))
    exact, rounded = per_class_accuracy(cm)
    oe, orr = overall_accuracy(cm)
    return {
        "status": "ok",
        "confusion": cm.counts.tolist(),
        "per_class_exact": exact,
        "per_class": rounded,
        "overall_exact": oe,
        "overall": orr,
    }


def compare_models(d: LabeledDataset, families=FAMILIES, configs=None, seed=0, test_fraction=0.2,
                   max_epochs=None, split_data=None) -> dict:
    """Fit every family on one shared split and score it on the shared test part.

    `families` entries are family names (built from `configs[name]`) or
    ``(name, factory)`` pairs where ``factory()`` returns an unfitted model.
    A failing family is recorded with status "failed".
    """
    configs = configs or {}
    train, test = split_data if split_data is not None else split(d, test_fraction, seed)
    report = {"seed": seed, "test_fraction": test_fraction, "n_train": len(train), "n_test": len(test),
              "families": {}, "models": {}}
    for entry in families:
        name, factory = entry if isinstance(entry, tuple) else (entry, None)
        try:
            if factory is None:
                model = build_model(name, configs.get(name, {}), seed=seed, max_epochs=max_epochs)
            else:
                model = factory()
            model.fit(train)
            report["families"][name] = evaluate_model(model, test)
            report["models"][name] = model
        except (ValueError, ArithmeticError, RuntimeError, KeyError) as exc:
            report["families"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    ok = [(r["overall_exact"], n) for n, r in report["families"].items() if r["status"] == "ok"]
    # highest accuracy wins; ties go to the lexicographically first name
    report["best"] = min(ok, key=lambda t: (-t[0], t[1]))[1] if ok else None
    return report


def report_json(report) -> str:
    doc = {k: v for k, v in report.items() if k != "models"}
    return json.dumps(doc, indent=2, sort_keys=True)


def report_text(report) -> str:
    lines = [f"test rows: {report['n_test']}  train rows: {report['n_train']}  seed: {report['seed']}"]
    header = f"{'family':<10}{'low':>6}{'medium':>8}{'high':>6}{'overall':>9}"
    lines.append(header)
    for name, r in report["families"].items():
        if r["status"] != "ok":
            lines.append(f"{name:<10}failed: {r['error']}")
            continue
        pc = ["-" if v is None else str(v) for v in r["per_class"]]
        lines.append(f"{name:<10}{pc[0]:>6}{pc[1]:>8}{pc[2]:>6}{r['overall']:>9}")
    lines.append(f"best: {report['best']}")
    return "\n".join(lines) + "\n"
