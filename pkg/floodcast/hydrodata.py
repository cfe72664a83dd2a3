"""
Canonical data model shared by every other module: daily series, station
records, meteorological forcings, unit conversion, seasonal encodings and
normalization statistics.

Missing values are stored as NaN inside float64 arrays. NaN is the only
missing marker; infinities are rejected.
"""

import datetime
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from floodcast.errors import ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "FORCING_VARIABLES",
    "TARGET_NAME",
    "UTC_OFFSET_NAME",
    "DailySeries",
    "Period",
    "StationRecord",
    "ForcingSource",
    "ForcingSeries",
    "ScalerStats",
    "to_specific_discharge",
    "from_specific_discharge",
    "encode_seasonality",
    "seasonal_features",
    "align",
    "fit_scaler",
    "apply_scaler",
]

FORCING_VARIABLES = ("SSR", "STR", "SP", "T2M", "TP")
TARGET_NAME = "discharge"
UTC_OFFSET_NAME = "utc_offset_hours"

# 86,400 s/d * 1e3 mm/m / 1e6 m2/km2
SECONDS_MM_PER_KM2 = 86.4
DAYS_PER_YEAR = 365.25

DateLike = Union[datetime.date, str, np.datetime64]


def as_date(value: DateLike) -> datetime.date:
    """Convert an ISO string, numpy datetime64 or date(time) to a date"""
    if isinstance(value, datetime.datetime):
        return value.date()
    if isinstance(value, datetime.date):
        return value
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]").item()
    return datetime.date.fromisoformat(str(value)[:10])


def _as_day(value: DateLike) -> np.datetime64:
    return np.datetime64(as_date(value), "D")


class Period(NamedTuple):
    """Inclusive calendar period"""

    start: datetime.date
    end: datetime.date

    @classmethod
    def parse(cls, value) -> "Period":
        if isinstance(value, Period):
            return value
        if isinstance(value, Mapping):
            start, end = value["start"], value["end"]
        else:
            start, end = value
        period = cls(as_date(start), as_date(end))
        if period.end < period.start:
            raise ValidationError(f"Period end {period.end} precedes start {period.start}.")
        return period

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    def contains(self, date: DateLike) -> bool:
        return self.start <= as_date(date) <= self.end

    def overlaps(self, other: "Period") -> bool:
        return self.start <= other.end and other.start <= self.end

    def to_list(self):
        return [self.start.isoformat(), self.end.isoformat()]


@dataclass(frozen=True, eq=False)
class DailySeries:
    """
    Gap-free daily series. Index ``i`` maps to ``start_date + i`` days.

    Parameters
    ----------
    start_date: datetime.date
        Date of the first value.
    values: np.ndarray
        1D float values, NaN where missing.
    """

    start_date: datetime.date
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValidationError("'values' must be 1D.")
        if np.isinf(values).any():
            raise ValidationError("'values' must not contain infinities; use NaN for missing.")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start_date", as_date(self.start_date))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end_date(self) -> datetime.date:
        return self.start_date + datetime.timedelta(days=len(self) - 1)

    @property
    def dates(self) -> np.ndarray:
        return np.datetime64(self.start_date, "D") + np.arange(len(self))

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(~self.missing))

    @property
    def period(self) -> Period:
        return Period(self.start_date, self.end_date)

    def index_of(self, date: DateLike) -> int:
        return int((_as_day(date) - np.datetime64(self.start_date, "D")).astype(int))

    def slice(self, start: DateLike, end: DateLike) -> "DailySeries":
        """Restrict to the inclusive range [start, end] clipped to the series"""
        first = max(self.index_of(start), 0)
        last = min(self.index_of(end), len(self) - 1)
        if last < first:
            return DailySeries(max(as_date(start), self.start_date), np.empty(0))
        return DailySeries(
            self.start_date + datetime.timedelta(days=first), self.values[first : last + 1]
        )

    def reindex(self, start: DateLike, n_days: int) -> "DailySeries":
        """Place the series on a new daily grid, filling uncovered days with NaN"""
        out = np.full(n_days, np.nan)
        offset = self.index_of(start)
        src_first = max(offset, 0)
        src_last = min(offset + n_days, len(self))
        if src_last > src_first:
            out[src_first - offset : src_last - offset] = self.values[src_first:src_last]
        return DailySeries(as_date(start), out)

    def map(self, fn) -> "DailySeries":
        return DailySeries(self.start_date, fn(self.values))

    def to_pandas(self):
        return pd.Series(self.values, index=pd.DatetimeIndex(self.dates), name="value")

    @classmethod
    def from_pandas(cls, series) -> "DailySeries":
        """Build from a date-indexed pandas Series; gaps become missing"""
        if len(series) == 0:
            raise ValidationError("Cannot build a DailySeries from an empty series.")
        index = pd.DatetimeIndex(series.index).normalize()
        if index.has_duplicates:
            raise ValidationError("Series has duplicate dates.")
        if not index.is_monotonic_increasing:
            raise ValidationError("Series dates must be strictly increasing.")
        full = pd.date_range(index[0], index[-1], freq="D")
        values = pd.Series(np.asarray(series, dtype=np.float64), index=index).reindex(full)
        return cls(index[0].date(), values.to_numpy())

    def __eq__(self, other):
        if not isinstance(other, DailySeries):
            return NotImplemented
        return self.start_date == other.start_date and np.array_equal(
            self.values, other.values, equal_nan=True
        )

    def __repr__(self):
        return f"DailySeries({self.start_date}..{self.end_date}, n={len(self)}, valid={self.n_valid})"


@dataclass(frozen=True, eq=False)
class StationRecord:
    """
    One gauge.

    Parameters
    ----------
    station_id: str
        Unique identifier.
    area_km2: float
        Drainage area, km2. Must be positive.
    discharge: DailySeries
        Observed specific discharge, mm/d.
    static_attrs: np.ndarray
        Static catchment attributes in the dataset's attribute order.
    utc_offset_hours: float
        Offset of the local observation day from UTC, in hours.
    """

    station_id: str
    area_km2: float
    discharge: DailySeries
    static_attrs: np.ndarray = field(default_factory=lambda: np.empty(0))
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if not self.area_km2 > 0:
            raise ValidationError(
                f"'area_km2' must be positive, got {self.area_km2} for station '{self.station_id}'."
            )
        attrs = np.array(self.static_attrs, dtype=np.float64).reshape(-1)
        attrs.setflags(write=False)
        object.__setattr__(self, "static_attrs", attrs)

    def static_inputs(self) -> np.ndarray:
        """Static model inputs: attributes followed by the UTC offset"""
        return np.append(self.static_attrs, self.utc_offset_hours)


class ForcingSource(str, Enum):
    REANALYSIS = "reanalysis"
    FORECAST_CONTROL = "forecast"


@dataclass(frozen=True, eq=False)
class ForcingSeries:
    """
    Daily basin-averaged meteorology for the five dynamic variables.

    Parameters
    ----------
    source: ForcingSource
        Reanalysis or forecast control run.
    lead_time_days: int
        0 for reanalysis, >= 1 for forecasts. Dates are valid dates.
    variables: dict
        Maps each name of ``FORCING_VARIABLES`` to a DailySeries. All series
        share the same date range.
    """

    source: ForcingSource
    lead_time_days: int
    variables: Mapping[str, DailySeries]

    def __post_init__(self):
        source = ForcingSource(self.source)
        object.__setattr__(self, "source", source)
        if (self.lead_time_days == 0) != (source == ForcingSource.REANALYSIS):
            raise ValidationError(
                f"'lead_time_days' must be 0 iff source is reanalysis, got {self.lead_time_days} for {source.value}."
            )
        if self.lead_time_days < 0:
            raise ValidationError("'lead_time_days' must be non-negative.")
        missing = [name for name in FORCING_VARIABLES if name not in self.variables]
        if missing:
            raise ValidationError(f"Forcing is missing variables: {missing}.")
        unknown = sorted(set(self.variables) - set(FORCING_VARIABLES))
        if unknown:
            raise ValidationError(f"Unknown forcing variables: {unknown}.")
        first = self.variables[FORCING_VARIABLES[0]]
        for name in FORCING_VARIABLES[1:]:
            series = self.variables[name]
            if series.start_date != first.start_date or len(series) != len(first):
                raise ValidationError(f"Forcing variable '{name}' has a different date range than '{FORCING_VARIABLES[0]}'.")
        tp = self.variables["TP"].values
        if (tp[~np.isnan(tp)] < 0).any():
            raise ValidationError("'TP' must be non-negative.")
        object.__setattr__(self, "variables", {name: self.variables[name] for name in FORCING_VARIABLES})

    @property
    def start_date(self) -> datetime.date:
        return self.variables["TP"].start_date

    def __len__(self) -> int:
        return len(self.variables["TP"])

    @property
    def period(self) -> Period:
        return self.variables["TP"].period

    def matrix(self) -> np.ndarray:
        """(time, 5) array in ``FORCING_VARIABLES`` order"""
        return np.stack([self.variables[name].values for name in FORCING_VARIABLES], axis=1)

    def reindex(self, start: DateLike, n_days: int) -> "ForcingSeries":
        return ForcingSeries(
            self.source,
            self.lead_time_days,
            {name: series.reindex(start, n_days) for name, series in self.variables.items()},
        )

    @classmethod
    def from_matrix(cls, source, lead_time_days: int, start_date: DateLike, matrix: np.ndarray) -> "ForcingSeries":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != len(FORCING_VARIABLES):
            raise ValidationError("'matrix' must be 2D, (time, 5).")
        return cls(
            source,
            lead_time_days,
            {name: DailySeries(start_date, matrix[:, i]) for i, name in enumerate(FORCING_VARIABLES)},
        )


def to_specific_discharge(q_m3s, area_km2: float):
    """
    Convert volumetric discharge to specific discharge.

    Parameters
    ----------
    q_m3s: float or array_like
        Discharge in m3/s. NaN marks missing values and is propagated.
    area_km2: float
        Drainage area in km2.

    Returns
    -------
    float or np.ndarray
        Specific discharge in mm/d, ``q * 86.4 / area``.
    """
    if not area_km2 > 0:
        raise ValidationError(f"'area_km2' must be positive, got {area_km2}.")
    q = np.asarray(q_m3s, dtype=np.float64)
    if (q[~np.isnan(q)] < 0).any():
        raise ValidationError("Discharge must be non-negative.")
    out = q * SECONDS_MM_PER_KM2 / area_km2
    return float(out) if out.ndim == 0 else out


def from_specific_discharge(q_mmd, area_km2: float):
    """Inverse of ``to_specific_discharge``: mm/d to m3/s"""
    if not area_km2 > 0:
        raise ValidationError(f"'area_km2' must be positive, got {area_km2}.")
    out = np.asarray(q_mmd, dtype=np.float64) * area_km2 / SECONDS_MM_PER_KM2
    return float(out) if out.ndim == 0 else out


def encode_seasonality(date: DateLike) -> np.ndarray:
    """
    Sine/cosine encodings of day-of-year (period 365.25) and month (period 12).

    Returns
    -------
    np.ndarray
        ``[sin doy, cos doy, sin month, cos month]``
    """
    date = as_date(date)
    doy = date.timetuple().tm_yday
    doy_angle = 2 * np.pi * doy / DAYS_PER_YEAR
    month_angle = 2 * np.pi * date.month / 12
    return np.array([np.sin(doy_angle), np.cos(doy_angle), np.sin(month_angle), np.cos(month_angle)])


def seasonal_features(start_date: DateLike, n_days: int) -> np.ndarray:
    """Vectorised ``encode_seasonality`` over consecutive days, shape (n_days, 4)"""
    days = np.datetime64(as_date(start_date), "D") + np.arange(n_days)
    years = days.astype("datetime64[Y]")
    doy = (days - years.astype("datetime64[D]")).astype(int) + 1
    month = (days.astype("datetime64[M]") - years.astype("datetime64[M]")).astype(int) + 1
    doy_angle = 2 * np.pi * doy / DAYS_PER_YEAR
    month_angle = 2 * np.pi * month / 12
    return np.stack(
        [np.sin(doy_angle), np.cos(doy_angle), np.sin(month_angle), np.cos(month_angle)], axis=1
    )


class Aligned(NamedTuple):
    a: np.ndarray
    b: np.ndarray
    dates: np.ndarray
    period: Optional[Period]

    def __len__(self):
        return len(self.a)


def align(a: DailySeries, b: DailySeries) -> Aligned:
    """
    Pair two series on the intersection of their date ranges, dropping any
    date that is missing in either.

    Returns
    -------
    Aligned
        Paired values, their dates and the shared date range (None when the
        ranges do not intersect).
    """
    start = max(a.start_date, b.start_date)
    end = min(a.end_date, b.end_date)
    if end < start:
        empty = np.empty(0)
        return Aligned(empty, empty, np.empty(0, dtype="datetime64[D]"), None)
    va = a.slice(start, end).values
    vb = b.slice(start, end).values
    keep = ~(np.isnan(va) | np.isnan(vb))
    dates = np.datetime64(start, "D") + np.arange(len(va))
    return Aligned(va[keep], vb[keep], dates[keep], Period(start, end))


@dataclass(frozen=True, eq=False)
class ScalerStats:
    """
    Global z-score statistics and per-basin discharge spread.

    Parameters
    ----------
    mean: dict
        Feature name -> pooled mean.
    std: dict
        Feature name -> pooled population standard deviation.
    constant: frozenset
        Names of features whose std is zero; they scale to 0.
    basin_sigma: dict
        Station id -> population std of observed specific discharge (mm/d)
        over the training period.
    """

    mean: Mapping[str, float]
    std: Mapping[str, float]
    constant: FrozenSet[str] = frozenset()
    basin_sigma: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.std.items():
            if not value >= 0:
                raise ValidationError(f"std of '{name}' must be non-negative.")
            if value == 0 and name not in self.constant:
                raise ValidationError(f"Feature '{name}' has zero std but is not flagged constant.")
        object.__setattr__(self, "constant", frozenset(self.constant))

    @property
    def features(self) -> Tuple[str, ...]:
        return tuple(self.mean)

    def transform(self, name: str, values) -> np.ndarray:
        """(x - mean) / std for one feature; constant features map to 0"""
        if name not in self.mean:
            raise ValidationError(f"Unknown variable '{name}' for this scaler.")
        values = np.asarray(values, dtype=np.float64)
        if name in self.constant:
            return np.where(np.isnan(values), np.nan, 0.0)
        return (values - self.mean[name]) / self.std[name]

    def inverse_transform(self, name: str, values) -> np.ndarray:
        if name not in self.mean:
            raise ValidationError(f"Unknown variable '{name}' for this scaler.")
        values = np.asarray(values, dtype=np.float64)
        if name in self.constant:
            return np.full_like(values, self.mean[name])
        return values * self.std[name] + self.mean[name]

    def scale_static(self, names: Sequence[str], values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.array([self.transform(name, v) for name, v in zip(names, values)])

    def normalized_sigma(self, station_id: str) -> float:
        """Per-basin sigma expressed in normalized target units"""
        sigma = self.basin_sigma[station_id]
        if TARGET_NAME in self.constant:
            return sigma
        return sigma / self.std[TARGET_NAME]

    def with_basin_sigma(self, basin_sigma: Mapping[str, float]) -> "ScalerStats":
        return ScalerStats(self.mean, self.std, self.constant, dict(basin_sigma))

    def to_dict(self) -> dict:
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "constant": sorted(self.constant),
            "basin_sigma": dict(sorted(self.basin_sigma.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScalerStats":
        return cls(
            {k: float(v) for k, v in data["mean"].items()},
            {k: float(v) for k, v in data["std"].items()},
            frozenset(data.get("constant", ())),
            {k: float(v) for k, v in data.get("basin_sigma", {}).items()},
        )

    def checksum(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _moments(name: str, chunks: Iterable[np.ndarray]) -> Tuple[float, float]:
    values = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in chunks] or [np.empty(0)])
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise ValidationError(f"Feature '{name}' is entirely missing over the fitting period.")
    if np.ptp(values) == 0:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std())


def fit_scaler(
    stations: Sequence[StationRecord],
    forcings: Mapping[str, ForcingSeries],
    period,
    static_names: Sequence[str] = (),
) -> ScalerStats:
    """
    Fit pooled z-score statistics over all basins and training dates.

    Parameters
    ----------
    stations: sequence of StationRecord
        Training stations.
    forcings: mapping
        Station id -> ForcingSeries used for training (the reanalysis).
    period: Period or (start, end)
        Training period. Only values inside it contribute.
    static_names: sequence of str
        Names of the static attributes, in ``static_attrs`` order.

    Returns
    -------
    ScalerStats
        Statistics for forcing variables, static attributes, the UTC offset
        and the discharge target, plus per-basin sigma.
    """
    period = Period.parse(period)
    if not stations:
        raise ValidationError("fit_scaler needs at least one station.")

    mean, std = {}, {}
    for name in FORCING_VARIABLES:
        chunks = [
            forcings[s.station_id].variables[name].slice(period.start, period.end).values
            for s in stations
            if s.station_id in forcings
        ]
        mean[name], std[name] = _moments(name, chunks)

    static_names = tuple(static_names) + (UTC_OFFSET_NAME,)
    static = np.stack([s.static_inputs() for s in stations])
    if static.shape[1] != len(static_names):
        raise ValidationError(
            f"Expected {len(static_names) - 1} static attributes, got {static.shape[1] - 1}."
        )
    for i, name in enumerate(static_names):
        mean[name], std[name] = _moments(name, [static[:, i]])

    basin_sigma = {}
    targets = []
    for station in stations:
        obs = station.discharge.slice(period.start, period.end).values
        obs = obs[~np.isnan(obs)]
        targets.append(obs)
        if obs.size:
            basin_sigma[station.station_id] = float(obs.std())
        else:
            logger.warning("Station %s has no observations in %s..%s", station.station_id, *period)
    mean[TARGET_NAME], std[TARGET_NAME] = _moments(TARGET_NAME, targets)

    constant = frozenset(name for name, value in std.items() if value == 0.0)
    if constant:
        logger.info("Constant features scale to zero: %s", sorted(constant))
    return ScalerStats(mean, std, constant, basin_sigma)


def apply_scaler(stats: ScalerStats, forcing: ForcingSeries) -> np.ndarray:
    """
    Scale a forcing with the given statistics.

    The same statistics apply whatever ``forcing.source`` is: forecasts are
    scaled with the reanalysis-fitted scaler through the one-to-one variable
    mapping, never refitted.

    Returns
    -------
    np.ndarray
        (time, 5) scaled matrix in ``FORCING_VARIABLES`` order.
    """
    columns = []
    for name, series in forcing.variables.items():
        columns.append(stats.transform(name, series.values))
    return np.stack(columns, axis=1)
