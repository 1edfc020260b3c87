"""Trip-log and census parsing, daily aggregation and dataset assembly."""

from __future__ import annotations

import csv
import datetime as dt
import io
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEMOGRAPHICS,
    DISTRIBUTION_FEATURES,
    PRODUCTION_FEATURES,
    LabeledDataset,
    TripContext,
)

STUDY_START = dt.date(2018, 9, 18)
STUDY_END = dt.date(2019, 5, 29)

TRIP_COLUMNS = ("origin_da", "dest_da", "date")
CENSUS_COLUMNS = ("da_id",) + DEMOGRAPHICS


class SchemaError(ValueError):
    """A required CSV column is missing."""


@dataclass(frozen=True)
class TripRecord:
    origin_da: str
    dest_da: str
    date: dt.date
    riders: int = 1


@dataclass(frozen=True)
class ZoneProfile:
    da_id: str
    population_density: float
    median_income: float
    avg_household_size: float
    pct_male: float
    pct_working_age: float

    def __post_init__(self):
        if not self.population_density > 0:
            raise ValueError(f"population_density must be > 0, got {self.population_density}")
        if not self.avg_household_size > 0:
            raise ValueError(f"avg_household_size must be > 0, got {self.avg_household_size}")
        for name in ("pct_male", "pct_working_age"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be within [0, 100], got {v}")

    def vector(self) -> list[float]:
        return [getattr(self, name) for name in DEMOGRAPHICS]


@dataclass(frozen=True)
class Reject:
    line: int
    raw: str
    reason: str


@dataclass(frozen=True)
class ProductionRow:
    da_id: str
    date: dt.date
    context: TripContext
    count: int


@dataclass(frozen=True)
class DistributionRow:
    origin_da: str
    dest_da: str
    date: dt.date
    context: TripContext
    count: int


@dataclass
class ServiceCalendar:
    """Maps service dates to their :class:`TripContext`.

    Weekends run the 5-hour service unless a date is overridden in
    `hours_override` (date -> 0/1).
    """

    start: dt.date = STUDY_START
    end: dt.date = STUDY_END
    hours_override: dict = field(default_factory=dict)

    def __contains__(self, day: dt.date) -> bool:
        return self.start <= day <= self.end

    def days(self):
        n = (self.end - self.start).days + 1
        return [self.start + dt.timedelta(days=i) for i in range(n)]

    def context(self, day: dt.date) -> TripContext:
        if day not in self:
            raise ValueError(f"{day.isoformat()} is outside the service calendar {self.start}..{self.end}")
        # Saturday = 1 ... Friday = 7
        dow = (day.weekday() - 5) % 7 + 1
        month = (day.month - 9) % 12 + 1
        if month > 9:
            raise ValueError(f"{day.isoformat()} falls outside the September..May season")
        hours = self.hours_override.get(day, 1 if dow in (1, 2) else 0)
        return TripContext(int(hours), dow, month)


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8-sig")
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8-sig") if isinstance(data, bytes) else data
    with open(source, newline="", encoding="utf-8-sig") as fh:
        return fh.read()


def _rows(source):
    reader = csv.reader(io.StringIO(_read_text(source), newline=""))
    try:
        header = next(reader)
    except StopIteration:
        return None, iter(())
    header = [h.strip() for h in header]

    def gen():
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            yield reader.line_num, row

    return header, gen()


def parse_trips(source, schema=None, zones=None, calendar=None):
    """Parse a trips CSV.

    Parameters
    ----------
    source : path, bytes, or binary/text stream
    schema : dict, optional
        Maps logical names (origin_da, dest_da, date, riders) to CSV column
        names. Missing keys default to the logical name.
    zones : collection of str, optional
        Known DA ids; trips referencing other ids are rejected.
    calendar : ServiceCalendar, optional
        Trips dated outside it are rejected.

    Returns
    -------
    (records, rejects)
    """
    schema = dict(schema or {})
    header, rows = _rows(source)
    if header is None:
        return [], []
    cols = {}
    for logical in TRIP_COLUMNS:
        name = schema.get(logical, logical)
        if name not in header:
            raise SchemaError(f"trips CSV is missing column {name!r} (for {logical})")
        cols[logical] = header.index(name)
    riders_name = schema.get("riders", "riders")
    riders_col = header.index(riders_name) if riders_name in header else None

    records, rejects = [], []
    for line, row in rows:
        raw = ",".join(row)
        try:
            origin = row[cols["origin_da"]].strip()
            dest = row[cols["dest_da"]].strip()
            day = dt.date.fromisoformat(row[cols["date"]].strip())
            riders = 1
            if riders_col is not None and row[riders_col].strip():
                riders = int(row[riders_col])
                if riders < 1:
                    raise ValueError(f"riders must be positive, got {riders}")
        except (ValueError, IndexError) as exc:
            rejects.append(Reject(line, raw, f"unparseable row: {exc}"))
            continue
        if zones is not None:
            unknown = [z for z in (origin, dest) if z not in zones]
            if unknown:
                rejects.append(Reject(line, raw, f"unknown DA id {unknown[0]!r}"))
                continue
        if calendar is not None and day not in calendar:
            rejects.append(Reject(line, raw, f"date {day.isoformat()} outside study window"))
            continue
        records.append(TripRecord(origin, dest, day, riders))
    return records, rejects


def parse_census(source):
    """Parse a census CSV into ``({da_id: ZoneProfile}, rejects)``.

    Duplicate ids keep the last row and emit a warning.
    """
    header, rows = _rows(source)
    if header is None:
        return {}, []
    missing = [c for c in CENSUS_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"census CSV is missing columns {missing}")
    idx = {c: header.index(c) for c in CENSUS_COLUMNS}
    registry, rejects = {}, []
    for line, row in rows:
        raw = ",".join(row)
        try:
            da = row[idx["da_id"]].strip()
            values = [float(row[idx[c]]) for c in DEMOGRAPHICS]
            profile = ZoneProfile(da, *values)
        except (ValueError, IndexError) as exc:
            rejects.append(Reject(line, raw, str(exc)))
            continue
        if da in registry:
            warnings.warn(f"duplicate da_id {da!r} on line {line}; keeping the last row", stacklevel=2)
        registry[da] = profile
    return registry, rejects


def write_rejects(rejects, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "raw", "reason"])
        for r in rejects:
            w.writerow([r.line, r.raw, r.reason])


def write_trips(trips, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_da", "dest_da", "date", "riders"])
        for t in trips:
            w.writerow([t.origin_da, t.dest_da, t.date.isoformat(), t.riders])


def write_census(registry, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CENSUS_COLUMNS)
        for da in sorted(registry):
            p = registry[da]
            w.writerow([da] + [repr(float(v)) for v in p.vector()])


def _check_dates(trips, calendar):
    for t in trips:
        if t.date not in calendar:
            raise ValueError(f"trip dated {t.date.isoformat()} is outside the service calendar")


def aggregate_production(trips, calendar: ServiceCalendar) -> list[ProductionRow]:
    """Daily trip counts per origin DA; each record counts as one trip."""
    _check_dates(trips, calendar)
    groups = Counter((t.origin_da, t.date) for t in trips)
    return [
        ProductionRow(da, day, calendar.context(day), n)
        for (da, day), n in sorted(groups.items())
    ]


def aggregate_distribution(trips, calendar: ServiceCalendar, include_intra=True) -> list[DistributionRow]:
    """Daily trip counts per (origin, destination) pair."""
    _check_dates(trips, calendar)
    groups = Counter(
        (t.origin_da, t.dest_da, t.date)
        for t in trips
        if include_intra or t.origin_da != t.dest_da
    )
    return [
        DistributionRow(o, d, day, calendar.context(day), n)
        for (o, d, day), n in sorted(groups.items())
    ]


def _profile(census, da):
    try:
        return census[da]
    except KeyError:
        raise KeyError(f"no census profile for DA {da!r}") from None


def build_production_dataset(rows, census, labeler) -> LabeledDataset:
    X = np.empty((len(rows), len(PRODUCTION_FEATURES)))
    y = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        X[i] = _profile(census, r.da_id).vector() + list(r.context.as_tuple())
        y[i] = labeler(r.count)
    return LabeledDataset(X, y, PRODUCTION_FEATURES)


def build_distribution_dataset(rows, census, labeler) -> LabeledDataset:
    X = np.empty((len(rows), len(DISTRIBUTION_FEATURES)))
    y = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        X[i] = (
            _profile(census, r.origin_da).vector()
            + _profile(census, r.dest_da).vector()
            + list(r.context.as_tuple())
        )
        y[i] = labeler(r.count)
    return LabeledDataset(X, y, DISTRIBUTION_FEATURES)


def write_counts(rows, path):
    """Write aggregated rows (production or distribution) as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows and isinstance(rows[0], DistributionRow):
            w.writerow(["origin_da", "dest_da", "date", "hours_of_operation", "day_of_week", "month_of_year", "count"])
            for r in rows:
                w.writerow([r.origin_da, r.dest_da, r.date.isoformat(), *r.context.as_tuple(), r.count])
        else:
            w.writerow(["da_id", "date", "hours_of_operation", "day_of_week", "month_of_year", "count"])
            for r in rows:
                w.writerow([r.da_id, r.date.isoformat(), *r.context.as_tuple(), r.count])


def read_counts(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            ctx = TripContext(int(rec["hours_of_operation"]), int(rec["day_of_week"]), int(rec["month_of_year"]))
            day = dt.date.fromisoformat(rec["date"])
            if "dest_da" in rec:
                rows.append(DistributionRow(rec["origin_da"], rec["dest_da"], day, ctx, int(rec["count"])))
            else:
                rows.append(ProductionRow(rec["da_id"], day, ctx, int(rec["count"])))
    return rows


def write_dataset(d: LabeledDataset, path):
    """Labeled dataset as CSV: feature columns then `label`; floats via repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(d.feature_names + ["label"])
        for x, y in zip(d.features, d.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def read_dataset(path) -> LabeledDataset:
    """Inverse of :func:`write_dataset`; kinds come from the known layouts."""
    header, rows = _rows(path)
    if header is None or header[-1] != "label":
        raise SchemaError(f"{path}: expected feature columns followed by 'label'")
    names = header[:-1]
    known = dict(PRODUCTION_FEATURES + DISTRIBUTION_FEATURES)
    meta = tuple((n, known.get(n, "continuous")) for n in names)
    data = [row for _, row in rows]
    X = np.array([[float(v) for v in r[:-1]] for r in data]).reshape(len(data), len(names))
    y = np.array([int(r[-1]) for r in data], dtype=np.int64)
    return LabeledDataset(X, y, meta)
