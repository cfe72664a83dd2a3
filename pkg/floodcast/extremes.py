"""
Return-period flood thresholds and event-based verification.

Thresholds come from a two-parameter Gumbel fitted to annual maxima with
the first two sample L-moments. Forecast events are judged against
thresholds fitted to the model's own reference simulation, observed
events against thresholds fitted to the gauge record.
"""

import bisect
import datetime
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from floodcast.errors import ValidationError
from floodcast.hydrodata import DailySeries

logger = logging.getLogger(__name__)

__all__ = [
    "RETURN_PERIODS",
    "ThresholdSource",
    "ExtremesConfig",
    "GumbelThresholds",
    "EventTally",
    "annual_maxima",
    "sample_l_moments",
    "gumbel_fit",
    "return_level",
    "fit_thresholds",
    "extract_exceedances",
    "match_events",
    "dual_threshold_verify",
    "aggregate_tallies",
    "tally_table",
]

RETURN_PERIODS = (1.5, 2.0, 5.0, 10.0, 20.0, 50.0)
EULER_GAMMA = 0.5772156649015329
MAX_RETURN_PERIOD = 50.0


class ThresholdSource(str, Enum):
    SIMULATED = "simulated"
    OBSERVED = "observed"


@dataclass(frozen=True)
class ExtremesConfig:
    return_periods: Tuple[float, ...] = RETURN_PERIODS
    min_days_per_year: int = 300
    min_annual_maxima: int = 10
    margin_days: int = 0
    aggregate_lead_times: bool = True

    def __post_init__(self):
        periods = tuple(float(t) for t in self.return_periods)
        for t in periods:
            if not 1.0 < t <= MAX_RETURN_PERIOD:
                raise ValidationError(f"Return periods must lie in (1, {MAX_RETURN_PERIOD:g}], got {t:g}.")
        if self.margin_days < 0:
            raise ValidationError("'margin_days' must be non-negative.")
        if not 1 <= self.min_days_per_year <= 366:
            raise ValidationError("'min_days_per_year' must be in [1, 366].")
        if self.min_annual_maxima < 2:
            raise ValidationError("'min_annual_maxima' must be at least 2.")
        object.__setattr__(self, "return_periods", tuple(sorted(set(periods))))

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExtremesConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValidationError(f"Unknown extremes options: {unknown}.")
        return cls(**known)


def annual_maxima(series: DailySeries, min_days: int = 300) -> List[Tuple[int, float]]:
    """
    Calendar-year maxima of a daily series.

    Years with fewer than ``min_days`` observed values are skipped.
    """
    values = series.to_pandas().dropna()
    if values.empty:
        return []
    grouped = values.groupby(values.index.year)
    counts = grouped.count()
    maxima = grouped.max()
    out = []
    for year in maxima.index:
        if counts[year] < min_days:
            logger.debug("Skipping year %d with %d observed days", year, counts[year])
            continue
        out.append((int(year), float(maxima[year])))
    skipped = len(maxima) - len(out)
    if skipped:
        logger.info("Skipped %d incomplete year(s) when extracting annual maxima", skipped)
    return out


def sample_l_moments(x) -> Tuple[float, float]:
    """
    First two sample L-moments from unbiased probability-weighted moments.

    Parameters
    ----------
    x: array_like
        At least two finite values.

    Returns
    -------
    (float, float)
        ``(lambda1, lambda2)``
    """
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = x.size
    if n < 2:
        raise ValidationError(f"L-moments need at least 2 values, got {n}.")
    if not np.isfinite(x).all():
        raise ValidationError("L-moment sample must be finite.")
    b0 = x.mean()
    b1 = np.sum(np.arange(n) / (n - 1) * x) / n
    return float(b0), float(2.0 * b1 - b0)


def gumbel_fit(lambda1: float, lambda2: float) -> Tuple[float, float]:
    """Gumbel ``(xi, alpha)`` from the first two L-moments"""
    if not lambda2 > 0:
        raise ValidationError(f"Degenerate sample: lambda2 must be positive, got {lambda2}.")
    alpha = lambda2 / np.log(2.0)
    return float(lambda1 - EULER_GAMMA * alpha), float(alpha)


def return_level(xi: float, alpha: float, return_period) -> float:
    """Gumbel quantile exceeded on average once every ``return_period`` years"""
    if not alpha > 0:
        raise ValidationError(f"'alpha' must be positive, got {alpha}.")
    if not return_period > 1:
        raise ValidationError(f"Return period must exceed 1 year, got {return_period}.")
    return float(xi - alpha * np.log(-np.log(1.0 - 1.0 / return_period)))


def _key(return_period: float) -> str:
    return f"{float(return_period):g}"


@dataclass(frozen=True)
class GumbelThresholds:
    """
    Parameters
    ----------
    xi, alpha: float
        Gumbel location and scale, mm/d.
    levels: dict
        Return period (years) -> threshold (mm/d).
    source: ThresholdSource
        Simulated or observed reference.
    n_annual_maxima: int
        Number of maxima the fit used.
    """

    xi: float
    alpha: float
    levels: Mapping[float, float]
    source: ThresholdSource
    n_annual_maxima: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"'alpha' must be positive, got {self.alpha}.")
        object.__setattr__(self, "source", ThresholdSource(self.source))
        object.__setattr__(self, "levels", {float(t): float(v) for t, v in sorted(self.levels.items())})
        values = list(self.levels.values())
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValidationError("Threshold levels must increase with return period.")

    @classmethod
    def from_parameters(
        cls, xi: float, alpha: float, source, n_annual_maxima: int, return_periods: Sequence[float] = RETURN_PERIODS
    ) -> "GumbelThresholds":
        levels = {float(t): return_level(xi, alpha, t) for t in return_periods}
        return cls(xi, alpha, levels, source, n_annual_maxima)

    def level(self, return_period: float) -> float:
        try:
            return self.levels[float(return_period)]
        except KeyError:
            raise ValidationError(f"No threshold for a {return_period:g}-year return period.") from None

    def to_dict(self) -> dict:
        return {
            "source": self.source.value,
            "xi": self.xi,
            "alpha": self.alpha,
            "n_annual_maxima": self.n_annual_maxima,
            "levels": {_key(t): v for t, v in self.levels.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GumbelThresholds":
        return cls(
            float(data["xi"]),
            float(data["alpha"]),
            {float(t): float(v) for t, v in data["levels"].items()},
            data["source"],
            int(data["n_annual_maxima"]),
        )


def fit_thresholds(
    series: DailySeries, source, config: ExtremesConfig = ExtremesConfig()
) -> Optional[GumbelThresholds]:
    """
    Fit return-period thresholds to a reference series. Returns None when
    there are too few complete years or the maxima are degenerate.
    """
    maxima = annual_maxima(series, config.min_days_per_year)
    if len(maxima) < config.min_annual_maxima:
        logger.info("Only %d annual maxima (< %d); thresholds undefined", len(maxima), config.min_annual_maxima)
        return None
    lambda1, lambda2 = sample_l_moments([m for _, m in maxima])
    if not lambda2 > 0:
        logger.info("Constant annual maxima; thresholds undefined")
        return None
    xi, alpha = gumbel_fit(lambda1, lambda2)
    return GumbelThresholds.from_parameters(xi, alpha, source, len(maxima), config.return_periods)


def fit_all_thresholds(
    series: Mapping[str, DailySeries], source, config: ExtremesConfig = ExtremesConfig(), threads: int = 1
) -> Dict[str, Optional[GumbelThresholds]]:
    """``fit_thresholds`` for every station; stations are independent"""
    ids = sorted(series)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(lambda k: fit_thresholds(series[k], source, config), ids))
    else:
        fitted = [fit_thresholds(series[k], source, config) for k in ids]
    return dict(zip(ids, fitted))


def save_thresholds(path, thresholds: Mapping[str, Optional[GumbelThresholds]]) -> Path:
    path = Path(path)
    payload = {k: (None if v is None else v.to_dict()) for k, v in sorted(thresholds.items())}
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_thresholds(path) -> Dict[str, Optional[GumbelThresholds]]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"Cannot read thresholds '{path}': {exc}") from exc
    return {k: (None if v is None else GumbelThresholds.from_dict(v)) for k, v in payload.items()}


def extract_exceedances(series: DailySeries, threshold: float) -> FrozenSet[datetime.date]:
    """Dates whose observed value is strictly above ``threshold``; each is one event"""
    if not np.isfinite(threshold):
        raise ValidationError(f"Threshold must be finite, got {threshold}.")
    values = series.values
    above = np.zeros(len(values), dtype=bool)
    observed = ~np.isnan(values)
    above[observed] = values[observed] > threshold
    return frozenset(d.item() for d in series.dates[above])


@dataclass(frozen=True)
class EventTally:
    return_period: Optional[float]
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0

    def __post_init__(self):
        if min(self.hits, self.misses, self.false_alarms) < 0:
            raise ValidationError("Event counts must be non-negative.")

    @property
    def precision(self) -> Optional[float]:
        predicted = self.hits + self.false_alarms
        return self.hits / predicted if predicted else None

    @property
    def recall(self) -> Optional[float]:
        actual = self.hits + self.misses
        return self.hits / actual if actual else None

    def __add__(self, other: "EventTally") -> "EventTally":
        if not isinstance(other, EventTally):
            return NotImplemented
        if self.return_period != other.return_period:
            raise ValidationError(
                f"Cannot add tallies for return periods {self.return_period} and {other.return_period}."
            )
        return EventTally(
            self.return_period,
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
        )

    def to_dict(self) -> dict:
        return {
            "return_period": self.return_period,
            "hits": self.hits,
            "misses": self.misses,
            "false_alarms": self.false_alarms,
            "precision": self.precision,
            "recall": self.recall,
        }


def match_events(
    forecast_days: Iterable[datetime.date],
    observed_days: Iterable[datetime.date],
    margin: int = 0,
    return_period: Optional[float] = None,
) -> EventTally:
    """
    Match forecast event days to observed event days one-to-one.

    Forecast days are visited in chronological order and each takes the
    earliest unmatched observed day within ``margin`` days of it.
    Unmatched forecast days are false alarms, unmatched observed days are
    misses.
    """
    if margin < 0:
        raise ValidationError(f"'margin' must be non-negative, got {margin}.")
    forecast = sorted({d.toordinal() for d in forecast_days})
    available = sorted({d.toordinal() for d in observed_days})
    n_observed = len(available)
    if margin == 0:
        hits = len(set(forecast).intersection(available))
    else:
        hits = 0
        for day in forecast:
            i = bisect.bisect_left(available, day - margin)
            if i < len(available) and available[i] <= day + margin:
                del available[i]
                hits += 1
    return EventTally(return_period, hits, n_observed - hits, len(forecast) - hits)


def dual_threshold_verify(
    forecast_sim: DailySeries,
    obs: DailySeries,
    thresholds_sim: GumbelThresholds,
    thresholds_obs: GumbelThresholds,
    margin: int = 0,
    return_periods: Sequence[float] = RETURN_PERIODS,
) -> Dict[float, EventTally]:
    """
    Tally hits, misses and false alarms per return period.

    Forecast events are exceedances of ``forecast_sim`` over the simulated
    reference thresholds, observed events are exceedances of ``obs`` over
    the observed reference thresholds. Only dates where both series have a
    value are considered.
    """
    if thresholds_sim.source != ThresholdSource.SIMULATED:
        raise ValidationError("'thresholds_sim' must come from the simulated reference.")
    if thresholds_obs.source != ThresholdSource.OBSERVED:
        raise ValidationError("'thresholds_obs' must come from the observed reference.")

    levels = [(float(t), thresholds_sim.level(t), thresholds_obs.level(t)) for t in return_periods]
    start = max(forecast_sim.start_date, obs.start_date)
    end = min(forecast_sim.end_date, obs.end_date)
    if end < start:
        return {t: EventTally(t) for t, _, _ in levels}
    fc = forecast_sim.slice(start, end).values
    ob = obs.slice(start, end).values
    both = ~(np.isnan(fc) | np.isnan(ob))
    fc = DailySeries(start, np.where(both, fc, np.nan))
    ob = DailySeries(start, np.where(both, ob, np.nan))
    tallies = {}
    for t, level_sim, level_obs in levels:
        forecast_days = extract_exceedances(fc, level_sim)
        observed_days = extract_exceedances(ob, level_obs)
        tallies[t] = match_events(forecast_days, observed_days, margin, t)
    return tallies


def aggregate_tallies(tallies: Iterable[Mapping[float, EventTally]]) -> Dict[float, EventTally]:
    """Sum raw counts per return period across basins (and lead times)"""
    total: Dict[float, EventTally] = {}
    for per_basin in tallies:
        for t, tally in per_basin.items():
            total[t] = total[t] + tally if t in total else tally
    return dict(sorted(total.items()))


def tally_table(tallies: Mapping[float, EventTally]) -> pd.DataFrame:
    """Global verification table, one row per return period"""
    rows = [tallies[t].to_dict() for t in sorted(tallies)]
    columns = ["return_period", "hits", "misses", "false_alarms", "precision", "recall"]
    return pd.DataFrame(rows, columns=columns)
