import numpy as np
import pytest

from odtdemand.cluster import DemandLabeler, elbow, count_frequencies
from odtdemand.core import validate_dataset
from odtdemand.ingest import (
    ServiceCalendar,
    aggregate_production,
    build_production_dataset,
    write_census,
)
from odtdemand.synthgen import (
    TABLE1_STATS,
    InfeasibleTarget,
    SynthConfig,
    beta_parameters,
    generate_census,
    generate_trips,
    make_blobs,
    zone_types,
)


@pytest.fixture(scope="module")
def world():
    cfg = SynthConfig(seed=0)
    census = generate_census(cfg)
    trips = generate_trips(cfg, census)
    return cfg, census, trips


def test_census_matches_targets(world):
    _, census, _ = world
    for j, name in enumerate(TABLE1_STATS):
        lo, hi, mean, _ = TABLE1_STATS[name]
        x = np.array([p.vector()[j] for p in census.values()])
        assert lo <= x.min() and x.max() <= hi
        assert abs(x.mean() - mean) <= 0.1 * mean
    dens = np.array([p.population_density for p in census.values()])
    assert 1530.6 <= dens.mean() <= 1870.8


def test_config_invariants():
    with pytest.raises(ValueError):
        SynthConfig(n_zones=1)
    with pytest.raises(ValueError):
        SynthConfig(target_stats={"pct_male": (50, 40, 45, 1)})


def test_infeasible_std_names_variable():
    with pytest.raises(InfeasibleTarget, match="median_income"):
        beta_parameters("median_income", 0, 1, 0.5, 0.6)


def test_census_csv_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        write_census(generate_census(SynthConfig(seed=3)), tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_zone_types_by_density_tercile(world):
    _, census, _ = world
    types = zone_types(census)
    dens = {t: [census[d].population_density for d in census if types[d] == t] for t in set(types.values())}
    assert max(dens["commercial"]) < min(dens["mixed"]) <= max(dens["mixed"]) < min(dens["residential"])


def test_production_counts_match_descriptive_stats(world):
    cfg, census, trips = world
    rows = aggregate_production(trips, cfg.calendar)
    counts = np.array([r.count for r in rows])
    assert 3.8 <= counts.mean() <= 4.8
    assert counts.min() == 1 and counts.max() <= 40
    levels = np.bincount([DemandLabeler((1, 5))(c) for c in counts], minlength=3) / len(counts) * 100
    assert np.all(np.abs(levels - [40, 36, 24]) <= 8)
    d = build_production_dataset(rows, census, DemandLabeler((1, 5)))
    assert validate_dataset(d) == []


def test_production_elbow_is_three(world):
    cfg, _, trips = world
    values, freq = count_frequencies([r.count for r in aggregate_production(trips, cfg.calendar)])
    assert elbow(values, 10, weights=freq)[0] == 3


def test_zero_rate_gives_no_trips():
    cfg = SynthConfig(n_days=10, rates={"commercial": 0, "mixed": 0, "residential": 0})
    assert generate_trips(cfg, generate_census(cfg)) == []


def test_poisson_process_and_determinism():
    cfg = SynthConfig(n_days=20, demand_process="poisson", seed=4)
    census = generate_census(cfg)
    assert generate_trips(cfg, census) == generate_trips(cfg, census)


def test_config_json_round_trip():
    cfg = SynthConfig(seed=9, n_zones=12, rates={"commercial": 3.0})
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_blobs_fixture():
    d = make_blobs(n_per_class=20, seed=1)
    assert d.n_features == 8 and np.all(d.features[:, -1] == 0)
    assert list(d.class_counts()) == [20, 20, 20]
