"""Ingestion and cleaning of daily time series and survey metadata.

Two tabular input schemas are auto-detected by header:

* daily:  ``date,region,deaths_daily,cases_daily,tests_daily``
* legacy cumulative: ``date,state,death,positive,totalTestResults``
  (differenced to daily increments internally)

Dates are ISO-8601 at the boundary and integer day offsets internally: a
region's model horizon spans days 1..T, day 1 being ``first_day``.  All
cleaning corrections are logged, one line per corrected value, as
``date,field,before,after``.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .observation_models import SurveyObservation, TestPeriod

DAILY_HEADER = ("date", "region", "deaths_daily", "cases_daily", "tests_daily")
LEGACY_HEADER = ("date", "state", "death", "positive", "totalTestResults")
FIELDS = ("deaths", "cases", "tests")


def bundled_populations() -> dict:
    """Region populations shipped with the package (overridable via config)."""
    text = resources.files("epistate.fixtures").joinpath("populations.json").read_text()
    return {k: float(v) for k, v in json.loads(text).items()}


def bundled_surveys_path():
    return resources.files("epistate.fixtures").joinpath("surveys.json")


@dataclass(frozen=True)
class RawRegionSeries:
    """Date-aligned daily increments for one region, before cleaning."""

    region_code: str
    first_day: dt.date
    deaths: np.ndarray
    cases: np.ndarray
    tests: np.ndarray
    gap_days: tuple = ()

    @property
    def days(self) -> int:
        return len(self.deaths)

    def date_of(self, day: int) -> dt.date:
        """Calendar date of 1-based model day ``day``."""
        return self.first_day + dt.timedelta(days=day - 1)


@dataclass(frozen=True)
class RegionDataset:
    """Model-ready data for one region."""

    region_code: str
    population: float
    first_day: dt.date
    deaths: np.ndarray
    cases: np.ndarray
    tests: np.ndarray
    surveys: tuple = ()
    periods: tuple = ()
    cleaning_log: tuple = ()

    def __post_init__(self):
        for name in FIELDS:
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
        n = len(self.deaths)
        if len(self.cases) != n or len(self.tests) != n:
            raise ValueError("daily series must share one date index")
        if any(getattr(self, name).min() < 0 for name in FIELDS if n):
            raise ValueError("cleaned daily counts must be nonnegative")

    @property
    def horizon(self) -> int:
        return len(self.deaths)

    @property
    def cum_cases(self) -> np.ndarray:
        return np.cumsum(self.cases)

    @property
    def cum_tests(self) -> np.ndarray:
        return np.cumsum(self.tests)

    def date_of(self, day: int) -> dt.date:
        return self.first_day + dt.timedelta(days=day - 1)

    def day_of(self, date: dt.date) -> int:
        return (date - self.first_day).days + 1


def _parse_date(text: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as err:
        raise ValueError(f"row {row}: unparseable date {text!r}") from err


def _parse_count(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return 0.0
    try:
        return float(text)
    except ValueError as err:
        raise ValueError(f"row {row}: bad value {text!r} in column {column!r}") from err


def ingest_timeseries(path, known_regions=None) -> dict:
    """Read a time-series file into per-region raw daily series.

    Returns {region_code: RawRegionSeries}.  Missing interior dates are
    filled with zero daily increments and recorded in ``gap_days``.
    ``known_regions`` (an iterable of codes) rejects unrecognized regions;
    None accepts everything.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = tuple(h.strip() for h in header)
        if set(DAILY_HEADER) <= set(header):
            schema = "daily"
            cols = {name: header.index(name) for name in DAILY_HEADER}
            region_col, value_cols = "region", DAILY_HEADER[2:]
        elif set(LEGACY_HEADER) <= set(header):
            schema = "legacy"
            cols = {name: header.index(name) for name in LEGACY_HEADER}
            region_col, value_cols = "state", LEGACY_HEADER[2:]
        else:
            raise ValueError(
                f"{path}: unrecognized header {header}; expected the daily "
                f"schema {DAILY_HEADER} or the legacy schema {LEGACY_HEADER}"
            )
        rows = {}
        known = set(known_regions) if known_regions is not None else None
        for rownum, rec in enumerate(reader, start=2):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            date = _parse_date(rec[cols["date"]], rownum)
            region = rec[cols[region_col]].strip()
            if known is not None and region not in known:
                raise ValueError(f"row {rownum}: unknown region code {region!r}")
            values = tuple(
                _parse_count(rec[cols[c]], rownum, c) for c in value_cols
            )
            key = (region, date)
            if key in rows:
                raise ValueError(f"row {rownum}: duplicate entry for {region} {date}")
            rows[key] = values

    out = {}
    for region in sorted({r for r, _ in rows}):
        dates = sorted(d for r, d in rows if r == region)
        first, last = dates[0], dates[-1]
        n = (last - first).days + 1
        grid = np.zeros((n, 3))
        present = np.zeros(n, dtype=bool)
        for d in dates:
            j = (d - first).days
            grid[j] = rows[(region, d)]
            present[j] = True
        gaps = tuple(
            first + dt.timedelta(days=int(j)) for j in np.flatnonzero(~present)
        )
        if schema == "legacy":
            # carry cumulative values across gap days, then difference
            for j in range(1, n):
                if not present[j]:
                    grid[j] = grid[j - 1]
            daily = np.empty_like(grid)
            daily[0] = grid[0]
            daily[1:] = np.diff(grid, axis=0)
        else:
            daily = grid  # gap days already zero increments
        out[region] = RawRegionSeries(
            region_code=region,
            first_day=first,
            deaths=daily[:, 0],
            cases=daily[:, 1],
            tests=daily[:, 2],
            gap_days=gaps,
        )
    return out


def _clamp_negatives(values: np.ndarray, field_name: str, first_day: dt.date,
                     log: list) -> np.ndarray:
    """Zero negative daily revisions, borrowing the excess from earlier days."""
    out = values.astype(float).copy()
    for t in range(len(out)):
        if out[t] >= 0:
            continue
        deficit = -out[t]
        date = first_day + dt.timedelta(days=t)
        log.append(f"{date},{field_name},{out[t]:g},0")
        out[t] = 0.0
        back = t - 1
        while deficit > 0 and back >= 0:
            take = min(out[back], deficit)
            if take > 0:
                bdate = first_day + dt.timedelta(days=back)
                log.append(f"{bdate},{field_name},{out[back]:g},{out[back] - take:g}")
                out[back] -= take
                deficit -= take
            back -= 1
        # any residual deficit exceeds all prior reports and is dropped
    return out


def clean(raw: RawRegionSeries, population: float,
          max_corrected_fraction: float = 0.2) -> RegionDataset:
    """Turn a raw series into a RegionDataset with nonnegative daily counts.

    Fails when more than ``max_corrected_fraction`` of days need correction
    (the series is considered unusable) or when cases are reported without
    any tests.
    """
    log: list = []
    for g in raw.gap_days:
        log.append(f"{g},all,missing,0")
    series = {}
    corrected_days = set()
    for name in FIELDS:
        vals = getattr(raw, name)
        before = len(log)
        series[name] = _clamp_negatives(vals, name, raw.first_day, log)
        for line in log[before:]:
            corrected_days.add(line.split(",", 1)[0])
    frac = len(corrected_days) / max(raw.days, 1)
    if frac > max_corrected_fraction:
        raise ValueError(
            f"{raw.region_code}: {frac:.0%} of days needed correction; "
            "data considered unusable"
        )
    if series["tests"].sum() == 0 and series["cases"].sum() > 0:
        raise ValueError(
            f"{raw.region_code}: positive cases reported with zero tests"
        )
    return RegionDataset(
        region_code=raw.region_code,
        population=population,
        first_day=raw.first_day,
        deaths=series["deaths"],
        cases=series["cases"],
        tests=series["tests"],
        cleaning_log=tuple(log),
    )


def make_periods(dataset: RegionDataset, l: int) -> tuple:
    """Aggregate the case/test series into complete consecutive L-day periods.

    Periods start on the first day with nonzero cumulative tests; trailing
    days that do not fill a complete period are dropped.
    """
    if l < 7:
        raise ValueError(f"period length must be at least 7 days, got {l}")
    cum_tests = dataset.cum_tests
    cum_cases = dataset.cum_cases
    nonzero = np.flatnonzero(cum_tests > 0)
    if nonzero.size == 0:
        return ()
    start_idx = int(nonzero[0])  # 0-based array index == day start_idx+1
    periods = []
    idx = start_idx
    while idx + l <= dataset.horizon:
        end_idx = idx + l - 1
        periods.append(
            TestPeriod(
                start_day=idx + 1,
                end_day=end_idx + 1,
                cases=float(dataset.cases[idx : end_idx + 1].sum()),
                tests=float(dataset.tests[idx : end_idx + 1].sum()),
                cum_cases_end=float(cum_cases[end_idx]),
                cum_tests_end=float(cum_tests[end_idx]),
            )
        )
        idx += l
    return tuple(periods)


def load_survey_records(path) -> list:
    """Read survey metadata (JSON list with calendar-date windows)."""
    with open(path) as fh:
        records = json.load(fh)
    required = {"region", "kind", "estimate", "sample_size", "window_start",
                "window_end"}
    out = []
    for k, rec in enumerate(records):
        missing = required - set(rec)
        if missing:
            raise ValueError(f"survey record {k}: missing fields {sorted(missing)}")
        out.append(
            {
                "region": rec["region"],
                "kind": rec["kind"],
                "estimate": float(rec["estimate"]),
                "sample_size": int(rec["sample_size"]),
                "window_start": dt.date.fromisoformat(rec["window_start"]),
                "window_end": dt.date.fromisoformat(rec["window_end"]),
            }
        )
    return out


def attach_surveys(dataset: RegionDataset, records) -> RegionDataset:
    """Resolve calendar windows to day indices and attach the observations."""
    obs = []
    for rec in records:
        if rec["region"] != dataset.region_code:
            continue
        lo = dataset.day_of(rec["window_start"])
        hi = dataset.day_of(rec["window_end"])
        if lo < 1 or hi > dataset.horizon:
            raise ValueError(
                f"survey window {rec['window_start']}..{rec['window_end']} "
                f"outside the model horizon of {dataset.region_code}"
            )
        obs.append(
            SurveyObservation(
                kind=rec["kind"],
                estimate=rec["estimate"],
                sample_size=rec["sample_size"],
                window=(lo, hi),
            )
        )
    return replace(dataset, surveys=tuple(obs))


def restrict_horizon(raw: RawRegionSeries, start: dt.date,
                     end: dt.date) -> RawRegionSeries:
    """Slice a raw series to [start, end]; days before the series begin at 0."""
    if end < start:
        raise ValueError("horizon end precedes its start")
    n = (end - start).days + 1
    out = {name: np.zeros(n) for name in FIELDS}
    for name in FIELDS:
        vals = getattr(raw, name)
        src_lo = max(0, (start - raw.first_day).days)
        src_hi = min(len(vals), (end - raw.first_day).days + 1)
        if src_hi > src_lo:
            dst_lo = src_lo - (start - raw.first_day).days
            out[name][dst_lo : dst_lo + (src_hi - src_lo)] = vals[src_lo:src_hi]
    gaps = tuple(g for g in raw.gap_days if start <= g <= end)
    return RawRegionSeries(
        region_code=raw.region_code,
        first_day=start,
        deaths=out["deaths"],
        cases=out["cases"],
        tests=out["tests"],
        gap_days=gaps,
    )


def default_first_day(raw: RawRegionSeries, lead_days: int = 30) -> dt.date:
    """Model day 1: the first reported death minus ``lead_days``."""
    nz = np.flatnonzero(raw.deaths > 0)
    if nz.size == 0:
        raise ValueError(f"{raw.region_code}: no deaths reported; cannot anchor day 1")
    first_death = raw.first_day + dt.timedelta(days=int(nz[0]))
    return first_death - dt.timedelta(days=lead_days)


def build_region_dataset(
    raw: RawRegionSeries,
    population: float,
    survey_records=(),
    l_days: int = 7,
    start: dt.date | None = None,
    end: dt.date | None = None,
    lead_days: int = 30,
) -> RegionDataset:
    """Full preparation pipeline: horizon, cleaning, surveys, periods."""
    if start is None:
        start = default_first_day(raw, lead_days)
    if end is None:
        end = raw.first_day + dt.timedelta(days=raw.days - 1)
    restricted = restrict_horizon(raw, start, end)
    dataset = clean(restricted, population)
    dataset = attach_surveys(dataset, survey_records)
    periods = make_periods(dataset, l_days)
    return replace(dataset, periods=periods)


def write_timeseries_csv(path, datasets) -> None:
    """Write daily-schema CSV for one or more datasets/raw series."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DAILY_HEADER)
        for ds in datasets:
            for j in range(len(ds.deaths)):
                writer.writerow(
                    [
                        (ds.first_day + dt.timedelta(days=j)).isoformat(),
                        ds.region_code,
                        f"{ds.deaths[j]:g}",
                        f"{ds.cases[j]:g}",
                        f"{ds.tests[j]:g}",
                    ]
                )


def write_survey_json(path, records) -> None:
    out = []
    for rec in records:
        out.append(
            {
                "region": rec["region"],
                "kind": rec["kind"],
                "estimate": rec["estimate"],
                "sample_size": rec["sample_size"],
                "window_start": rec["window_start"].isoformat(),
                "window_end": rec["window_end"].isoformat(),
            }
        )
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)


def write_cleaning_log(path, dataset: RegionDataset) -> None:
    with open(path, "w") as fh:
        for line in dataset.cleaning_log:
            fh.write(line + "\n")
