import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from odtdemand.core import (
    DISTRIBUTION_FEATURES,
    PRODUCTION_FEATURES,
    LabeledDataset,
    ScalerState,
    TripContext,
    fit_scaler,
    scale_features,
    validate_dataset,
)


def test_feature_layouts():
    assert len(PRODUCTION_FEATURES) == 8
    assert len(DISTRIBUTION_FEATURES) == 13
    names = [n for n, _ in DISTRIBUTION_FEATURES]
    assert names[:5] == [f"origin_{n}" for n, _ in PRODUCTION_FEATURES[:5]]
    assert names[5:10] == [f"dest_{n}" for n, _ in PRODUCTION_FEATURES[:5]]
    assert dict(PRODUCTION_FEATURES)["hours_of_operation"] == "binary"


@pytest.mark.parametrize("args", [(2, 1, 1), (0, 0, 1), (0, 8, 1), (1, 1, 10), (1, 1, 0)])
def test_trip_context_rejects_out_of_range(args):
    with pytest.raises(ValueError):
        TripContext(*args)


def test_valid_dataset_has_no_problems():
    d = LabeledDataset(np.ones((4, 8)), [0, 1, 2, 1])
    assert validate_dataset(d) == []


def test_wrong_width_reported():
    meta = tuple((f"x{j}", "continuous") for j in range(9))
    problems = validate_dataset(LabeledDataset(np.ones((2, 9)), [0, 1], meta))
    assert "expected 8 or 13 columns, got 9" in problems


def test_bad_label_and_nan_reported():
    X = np.ones((3, 8))
    X[1, 2] = np.nan
    problems = validate_dataset(LabeledDataset(X, [0, 5, 1]))
    assert any("label out of {0,1,2}: [5]" in p for p in problems)
    assert any("NaN" in p for p in problems)


def test_dataset_arrays_are_immutable_copies():
    X = np.zeros((2, 8))
    d = LabeledDataset(X, [0, 1])
    X[0, 0] = 9
    assert d.features[0, 0] == 0
    with pytest.raises(ValueError):
        d.features[0, 0] = 1


def test_minmax_scaling_examples():
    X = np.array([[10.0] + [0] * 7, [30.0] + [1] * 7])
    state = fit_scaler(X, [k for _, k in PRODUCTION_FEATURES])
    Z = state.transform(np.array([[35.0] + [0] * 7, [20.0] + [0] * 7]))
    assert Z[0, 0] == 1.0  # clamped
    assert Z[1, 0] == 0.5
    # context columns pass through unscaled
    assert np.array_equal(state.transform(X)[:, 5:], X[:, 5:])


def test_constant_continuous_column_warns_and_maps_to_zero():
    X = np.ones((3, 8))
    X[:, 1] = [1, 2, 3]
    with pytest.warns(RuntimeWarning):
        d, state = scale_features(LabeledDataset(X, [0, 1, 2]))
    assert np.all(d.features[:, 0] == 0)


def test_scaler_dict_round_trip():
    X = np.random.default_rng(0).normal(size=(5, 8))
    s = fit_scaler(X, [k for _, k in PRODUCTION_FEATURES])
    s2 = ScalerState.from_dict(s.to_dict())
    assert np.array_equal(s.transform(X), s2.transform(X))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@given(hnp.arrays(np.float64, (6, 8), elements=st.floats(-1e6, 1e6)))
def test_scaled_training_data_in_unit_interval_and_invertible(X):
    kinds = [k for _, k in PRODUCTION_FEATURES]
    s = fit_scaler(X, kinds, "minmax")
    Z = s.transform(X)
    cont = s.scaled & (s.hi > s.lo)
    assert np.all((Z[:, cont] >= 0) & (Z[:, cont] <= 1))
    back = s.inverse_transform(Z)
    assert np.allclose(back[:, cont], X[:, cont], rtol=1e-9, atol=1e-6)
