"""Shared domain types, feature layouts and the classifier base class."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

N_CLASSES = 3
LEVEL_NAMES = ("low", "medium", "high")

CONTINUOUS = "continuous"
DISCRETE = "discrete"
BINARY = "binary"
FEATURE_KINDS = (CONTINUOUS, DISCRETE, BINARY)

DEMOGRAPHICS = (
    "population_density",
    "median_income",
    "avg_household_size",
    "pct_male",
    "pct_working_age",
)
CONTEXT = (
    ("hours_of_operation", BINARY),
    ("day_of_week", DISCRETE),
    ("month_of_year", DISCRETE),
)

PRODUCTION_FEATURES = tuple((name, CONTINUOUS) for name in DEMOGRAPHICS) + CONTEXT
DISTRIBUTION_FEATURES = (
    tuple((f"origin_{name}", CONTINUOUS) for name in DEMOGRAPHICS)
    + tuple((f"dest_{name}", CONTINUOUS) for name in DEMOGRAPHICS)
    + CONTEXT
)
VALID_WIDTHS = (len(PRODUCTION_FEATURES), len(DISTRIBUTION_FEATURES))


@dataclass(frozen=True)
class TripContext:
    """Per-day service context.

    hours_of_operation is 0 for the 3-hour weekday service and 1 for the
    5-hour weekend service; day_of_week runs 1..7 from Saturday; month_of_year
    runs 1..9 from September.
    """

    hours_of_operation: int
    day_of_week: int
    month_of_year: int

    def __post_init__(self):
        if self.hours_of_operation not in (0, 1):
            raise ValueError(f"hours_of_operation must be 0 or 1, got {self.hours_of_operation}")
        if not 1 <= self.day_of_week <= 7:
            raise ValueError(f"day_of_week must be in 1..7, got {self.day_of_week}")
        if not 1 <= self.month_of_year <= 9:
            raise ValueError(f"month_of_year must be in 1..9, got {self.month_of_year}")

    def as_tuple(self):
        return (self.hours_of_operation, self.day_of_week, self.month_of_year)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus demand-level labels.

    Arrays are copied and marked read-only on construction. No validation is
    done here; use :func:`validate_dataset` for a report.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_meta: tuple = field(default=PRODUCTION_FEATURES)

    def __post_init__(self):
        X = np.array(self.features, dtype=float, copy=True)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.array(self.labels, copy=True).astype(np.int64)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_meta", tuple(tuple(m) for m in self.feature_meta))

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [name for name, _ in self.feature_meta]

    @property
    def feature_kinds(self) -> list[str]:
        return [kind for _, kind in self.feature_meta]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.labels[idx], self.feature_meta)

    def with_features(self, X) -> "LabeledDataset":
        return LabeledDataset(X, self.labels, self.feature_meta)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)


def validate_dataset(d: LabeledDataset) -> list[str]:
    """Return a list of human-readable violations; empty iff `d` is valid."""
    problems = []
    X, y = d.features, d.labels
    if X.shape[1] not in VALID_WIDTHS:
        problems.append(f"expected 8 or 13 columns, got {X.shape[1]}")
    if len(d.feature_meta) != X.shape[1]:
        problems.append(
            f"feature_meta has {len(d.feature_meta)} entries for {X.shape[1]} columns"
        )
    for name, kind in d.feature_meta:
        if kind not in FEATURE_KINDS:
            problems.append(f"feature {name!r} has unknown kind {kind!r}")
    if X.shape[0] != y.shape[0]:
        problems.append(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    n_nan = int(np.isnan(X).sum())
    if n_nan:
        rows = np.unique(np.nonzero(np.isnan(X))[0])
        problems.append(f"{n_nan} NaN cells (first row {int(rows[0])})")
    bad = ~np.isin(y, np.arange(N_CLASSES))
    if bad.any():
        values = sorted(set(int(v) for v in y[bad]))
        problems.append(f"label out of {{0,1,2}}: {values}")
    return problems


@dataclass(frozen=True)
class ScalerState:
    """Column bounds captured from training data.

    Only columns flagged in `scaled` are transformed; others pass through.
    """

    kind: str
    lo: np.ndarray
    hi: np.ndarray
    scaled: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.kind == "raw" or not self.scaled.any():
            return X
        out = X.copy()
        cols = self.scaled
        span = self.hi[cols] - self.lo[cols]
        safe = np.where(span > 0, span, 1.0)
        z = (X[..., cols] - self.lo[cols]) / safe
        z = np.where(span > 0, z, 0.0)
        out[..., cols] = np.clip(z, 0.0, 1.0)
        return out

    def inverse_transform(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if self.kind == "raw":
            return Z
        out = Z.copy()
        cols = self.scaled
        out[..., cols] = self.lo[cols] + Z[..., cols] * (self.hi[cols] - self.lo[cols])
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "scaled": self.scaled.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScalerState":
        return cls(
            doc["kind"],
            np.asarray(doc["lo"], dtype=float),
            np.asarray(doc["hi"], dtype=float),
            np.asarray(doc["scaled"], dtype=bool),
        )


def fit_scaler(X, kinds: Sequence[str], kind: str = "minmax") -> ScalerState:
    X = np.asarray(X, dtype=float)
    if kind not in ("raw", "minmax"):
        raise ValueError(f"unknown scaling kind {kind!r}")
    scaled = np.array([k == CONTINUOUS for k in kinds], dtype=bool)
    if kind == "raw":
        scaled[:] = False
    lo = X.min(axis=0) if len(X) else np.zeros(X.shape[1])
    hi = X.max(axis=0) if len(X) else np.zeros(X.shape[1])
    constant = scaled & (hi <= lo)
    if constant.any():
        warnings.warn(
            f"constant continuous column(s) {np.flatnonzero(constant).tolist()} mapped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    return ScalerState(kind, lo, hi, scaled)


def scale_features(d: LabeledDataset, kind: str = "minmax"):
    """Scale continuous columns of `d`; returns ``(scaled_dataset, state)``."""
    state = fit_scaler(d.features, d.feature_kinds, kind)
    return d.with_features(state.transform(d.features)), state


class Classifier:
    """Base class for every model family.

    Subclasses implement ``_fit`` and ``predict_proba``. ``predict`` is the
    argmax of ``predict_proba`` with ties going to the lowest class index.
    """

    n_classes = N_CLASSES
    seed: int | None = None

    def fit(self, d: LabeledDataset, seed: int | None = None):
        if seed is not None:
            self.seed = int(seed)
        self._fit(d)
        return self

    def _fit(self, d: LabeledDataset):
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        P = self.predict_proba(np.atleast_2d(X))
        # np.argmax returns the first maximum, i.e. the lowest class index
        return np.argmax(P, axis=1)


def as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X.reshape(1, -1) if X.ndim == 1 else X
