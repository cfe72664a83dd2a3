"""
Synthetic basins with known hydrology: a seeded wet/dry precipitation
chain drives an optional degree-day snowpack and a linear reservoir.
Forecast forcings are the reanalysis with a systematic wet bias and
temperature offset, the kind of shift fine-tuning has to absorb.
"""

import datetime
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy import signal

from floodcast.curation import BasinGeometry
from floodcast.errors import ValidationError
from floodcast.hydrodata import (
    DailySeries,
    ForcingSeries,
    ForcingSource,
    StationRecord,
    as_date,
    from_specific_discharge,
    seasonal_features,
)
from floodcast.io import write_attributes_csv, write_forecast_csv, write_geojson, write_reanalysis_csv, write_series_csv
from floodcast.manifest import RunManifest

logger = logging.getLogger(__name__)

WET_DAY_MM = 1.0
MAX_LEAD_TIME = 9
ATTRIBUTE_NAMES = ("log_area", "storage_coefficient", "mean_precipitation", "mean_temperature", "snow_fraction")


@dataclass(frozen=True)
class SyntheticBasinSpec:
    """
    Parameters
    ----------
    station_id: str
        Identifier of the generated station.
    storage_coefficient: float
        Reservoir outflow fraction per day, in (0, 1).
    area_km2: float
        Drainage area.
    snow: bool
        Accumulate precipitation as snow below 0 degC and melt it with a
        degree-day factor.
    degree_day_factor: float
        Melt in mm per degC above 0 per day.
    wet_bias: float
        Factor applied to forecast precipitation on wet days.
    temperature_offset: float
        Added to forecast temperature, degC.
    lead_time_noise: float
        Std of log-normal noise on forecast precipitation per lead-time day.
    initial_storage: float
        Reservoir storage on the first day, mm.
    p_wet_after_dry, p_wet_after_wet: float
        Transition probabilities of the wet/dry chain.
    mix_weight: float
        Probability that a wet-day amount comes from the light-rain gamma.
    light_shape, light_scale, heavy_shape, heavy_scale: float
        Parameters of the two gamma components, mm.
    mean_temperature, temperature_amplitude: float
        Seasonal temperature cycle, degC.
    missing_fraction: float
        Fraction of discharge observations removed at random.
    utc_offset_hours: float
        Offset of the local observation day from UTC.
    """

    station_id: str = "synthetic"
    storage_coefficient: float = 0.2
    area_km2: float = 1000.0
    snow: bool = False
    degree_day_factor: float = 3.0
    wet_bias: float = 1.3
    temperature_offset: float = 0.0
    lead_time_noise: float = 0.0
    initial_storage: float = 0.0
    p_wet_after_dry: float = 0.3
    p_wet_after_wet: float = 0.65
    mix_weight: float = 0.75
    light_shape: float = 0.8
    light_scale: float = 4.0
    heavy_shape: float = 2.0
    heavy_scale: float = 10.0
    mean_temperature: float = 8.0
    temperature_amplitude: float = 10.0
    missing_fraction: float = 0.0
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.storage_coefficient < 1.0:
            raise ValidationError(f"'storage_coefficient' must be in (0, 1), got {self.storage_coefficient}.")
        if not self.area_km2 > 0:
            raise ValidationError("'area_km2' must be positive.")
        if self.degree_day_factor < 0 or self.initial_storage < 0:
            raise ValidationError("'degree_day_factor' and 'initial_storage' must be non-negative.")
        if not self.wet_bias > 0:
            raise ValidationError("'wet_bias' must be positive.")
        for name in ("p_wet_after_dry", "p_wet_after_wet", "mix_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"'{name}' must be a probability.")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValidationError("'missing_fraction' must be in [0, 1).")
        if min(self.light_shape, self.light_scale, self.heavy_shape, self.heavy_scale) <= 0:
            raise ValidationError("Gamma parameters must be positive.")


class SyntheticBasin(NamedTuple):
    record: StationRecord
    reanalysis: ForcingSeries
    forecasts: Dict[int, ForcingSeries]
    final_storage: float
    final_snowpack: float


def linear_reservoir(inflow, k: float, initial_storage: float = 0.0) -> Tuple[np.ndarray, float]:
    """
    Route inflow through ``S[t+1] = (1 - k) S[t] + P[t]``, ``Q[t] = k S[t]``.

    Returns
    -------
    (np.ndarray, float)
        Outflow for every day and the storage after the last day.
    """
    inflow = np.asarray(inflow, dtype=np.float64)
    if not 0.0 < k < 1.0:
        raise ValidationError(f"'k' must be in (0, 1), got {k}.")
    n = inflow.size
    decay = (1.0 - k) ** np.arange(n + 1)
    storage = signal.lfilter([0.0, 1.0], [1.0, -(1.0 - k)], np.append(inflow, 0.0)) + initial_storage * decay
    return k * storage[:n], float(storage[n])


def degree_day_snow(tp, t2m, degree_day_factor: float) -> Tuple[np.ndarray, float]:
    """
    Split precipitation into rain and snow at 0 degC and melt the pack by
    ``degree_day_factor`` per degree above 0.

    Returns
    -------
    (np.ndarray, float)
        Liquid water reaching the reservoir per day and the final snowpack.
    """
    tp = np.asarray(tp, dtype=np.float64)
    t2m = np.asarray(t2m, dtype=np.float64)
    liquid = np.empty_like(tp)
    pack = 0.0
    for t in range(tp.size):
        if t2m[t] < 0.0:
            pack += tp[t]
            liquid[t] = 0.0
        else:
            melt = min(pack, degree_day_factor * t2m[t])
            pack -= melt
            liquid[t] = tp[t] + melt
    return liquid, pack


def _precipitation(spec: SyntheticBasinSpec, n_days: int, rng: np.random.Generator) -> np.ndarray:
    wet = np.empty(n_days, dtype=bool)
    draws = rng.random(n_days)
    state = False
    for t in range(n_days):
        state = draws[t] < (spec.p_wet_after_wet if state else spec.p_wet_after_dry)
        wet[t] = state
    light = rng.gamma(spec.light_shape, spec.light_scale, n_days)
    heavy = rng.gamma(spec.heavy_shape, spec.heavy_scale, n_days)
    amount = np.where(rng.random(n_days) < spec.mix_weight, light, heavy)
    return np.where(wet, amount, 0.0)


def generate_synthetic(
    spec: SyntheticBasinSpec,
    n_days: int,
    seed: int = 0,
    start_date="2000-01-01",
    window: int = 60,
    max_lead_time: int = MAX_LEAD_TIME,
) -> SyntheticBasin:
    """
    Generate one basin: observed specific discharge, reanalysis forcing and
    forecast forcings for lead times 1..``max_lead_time`` (valid dates).

    The same ``(spec, n_days, seed, start_date)`` always gives the same data.
    """
    if n_days < 2 * window:
        raise ValidationError(f"'n_days' must be at least 2 * window = {2 * window}, got {n_days}.")
    start_date = as_date(start_date)
    rng = np.random.default_rng(seed)

    tp = _precipitation(spec, n_days, rng)
    season = seasonal_features(start_date, n_days)
    # peaks around day 183
    cycle = -season[:, 1]
    t2m = spec.mean_temperature + spec.temperature_amplitude * cycle + rng.normal(0.0, 2.0, n_days)
    wet = tp > WET_DAY_MM
    ssr = np.clip(180.0 + 120.0 * cycle - 80.0 * wet + rng.normal(0.0, 20.0, n_days), 0.0, None)
    strd = 310.0 + 25.0 * cycle + 15.0 * wet + rng.normal(0.0, 8.0, n_days)
    sp = 98_000.0 + rng.normal(0.0, 400.0, n_days) - 300.0 * wet

    if spec.snow:
        liquid, pack = degree_day_snow(tp, t2m, spec.degree_day_factor)
    else:
        liquid, pack = tp, 0.0
    q, final_storage = linear_reservoir(liquid, spec.storage_coefficient, spec.initial_storage)

    observed = q.copy()
    if spec.missing_fraction > 0:
        observed[rng.random(n_days) < spec.missing_fraction] = np.nan

    reanalysis = ForcingSeries.from_matrix(
        ForcingSource.REANALYSIS, 0, start_date, np.stack([ssr, strd, sp, t2m, tp], axis=1)
    )
    forecasts = {}
    for lead in range(1, max_lead_time + 1):
        noise = np.exp(rng.normal(0.0, spec.lead_time_noise * lead, n_days)) if spec.lead_time_noise else 1.0
        tp_fc = np.where(wet, tp * spec.wet_bias * noise, tp)
        matrix = np.stack([ssr, strd, sp, t2m + spec.temperature_offset, tp_fc], axis=1)
        forecasts[lead] = ForcingSeries.from_matrix(ForcingSource.FORECAST_CONTROL, lead, start_date, matrix)

    attrs = np.array(
        [
            np.log10(spec.area_km2),
            spec.storage_coefficient,
            tp.mean(),
            t2m.mean(),
            tp[t2m < 0.0].sum() / max(tp.sum(), 1e-12) if spec.snow else 0.0,
        ]
    )
    record = StationRecord(spec.station_id, spec.area_km2, DailySeries(start_date, observed), attrs, spec.utc_offset_hours)
    return SyntheticBasin(record, reanalysis, forecasts, final_storage, pack)


def split_periods(start_date, n_days: int) -> Dict[str, Tuple[str, str]]:
    """
    Chronological split: 70 % pre-training (its last 30 %, at least a year,
    doubles as fine-tuning), 10 % validation, 20 % test.
    """
    start = as_date(start_date)
    day = lambda i: (start + datetime.timedelta(days=int(i))).isoformat()
    n_pre = int(round(0.7 * n_days))
    n_val = int(round(0.1 * n_days))
    n_fine = min(n_pre, max(365, int(round(0.3 * n_pre))))
    return {
        "pretrain": (day(0), day(n_pre - 1)),
        "finetune": (day(n_pre - n_fine), day(n_pre - 1)),
        "validation": (day(n_pre), day(n_pre + n_val - 1)),
        "test": (day(n_pre + n_val), day(n_days - 1)),
    }


DESK_SECTIONS = {
    "model": {"hidden_size": 32, "dropout_p": 0.1, "window": 60, "horizon": 10},
    "pretrain": {
        "lr_init": 3e-3,
        "epochs": 20,
        "warmup_epochs": 2,
        "updates_per_epoch": 50,
        "batch_size": 16,
        "validation_every": 5,
    },
    "finetune": {
        "lr_init": 1e-3,
        "epochs": 10,
        "warmup_epochs": 1,
        "updates_per_epoch": 50,
        "batch_size": 16,
        "validation_every": 5,
    },
}


def _square(station_id: str, x: float, y: float, area_km2: float) -> BasinGeometry:
    side = np.sqrt(area_km2)
    ring = ((x, y), (x + side, y), (x + side, y + side), (x, y + side), (x, y))
    return BasinGeometry(station_id, (ring,))


def write_synthetic_dataset(
    out_dir,
    n_basins: int = 12,
    n_days: int = 4383,
    seed: int = 0,
    start_date="2009-01-01",
    wet_bias: float = 1.3,
    with_duplicate: bool = True,
    with_flatline: bool = True,
    sections: Optional[dict] = None,
) -> Path:
    """
    Write a complete synthetic dataset and its manifest.

    Besides ``n_basins`` regular basins, the dataset holds a near-copy of the
    first basin (same catchment, shorter recent record) and a gauge stuck at
    a constant value, so curation has something to remove.

    Returns
    -------
    Path
        The manifest file.
    """
    if n_basins < 1:
        raise ValidationError("'n_basins' must be positive.")
    out_dir = Path(out_dir)
    for sub in ("discharge", "reanalysis", "forecast"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start_date = as_date(start_date)
    periods = split_periods(start_date, n_days)

    stations, attributes, geometries = [], {}, {}

    def emit(basin: SyntheticBasin, geometry: BasinGeometry):
        record = basin.record
        sid = record.station_id
        discharge = DailySeries(record.discharge.start_date, from_specific_discharge(record.discharge.values, record.area_km2))
        write_series_csv(out_dir / "discharge" / f"{sid}.csv", discharge)
        write_reanalysis_csv(out_dir / "reanalysis" / f"{sid}.csv", basin.reanalysis)
        write_forecast_csv(out_dir / "forecast" / f"{sid}.csv", basin.forecasts)
        attributes[sid] = record.static_attrs
        geometries[sid] = geometry
        stations.append(
            {
                "station_id": sid,
                "area_km2": record.area_km2,
                "utc_offset_hours": record.utc_offset_hours,
                "discharge": f"discharge/{sid}.csv",
                "reanalysis": f"reanalysis/{sid}.csv",
                "forecast": f"forecast/{sid}.csv",
            }
        )

    first = None
    for i in range(n_basins):
        spec = SyntheticBasinSpec(
            station_id=f"S{i:04d}",
            storage_coefficient=float(rng.uniform(0.05, 0.5)),
            area_km2=float(10 ** rng.uniform(2.0, 4.5)),
            snow=i % 3 == 2,
            wet_bias=wet_bias,
            missing_fraction=0.02,
            mean_temperature=float(rng.uniform(2.0, 14.0)),
            utc_offset_hours=float(rng.choice([-1.0, 0.0, 1.0, 2.0])),
        )
        basin = generate_synthetic(spec, n_days, seed=seed * 1000 + i, start_date=start_date)
        emit(basin, _square(spec.station_id, (i % 4) * 400.0, (i // 4) * 400.0, spec.area_km2))
        if first is None:
            first = (spec, basin)

    if with_duplicate:
        spec, basin = first
        values = basin.record.discharge.values * (1.0 + rng.normal(0.0, 0.01, n_days))
        cutoff = DailySeries(start_date, values).index_of(periods["finetune"][0])
        values[cutoff + (n_days - cutoff) // 2 :] = np.nan
        dup = basin._replace(record=replace(basin.record, station_id=f"{spec.station_id}B", discharge=DailySeries(start_date, values)))
        shift = 0.02 * np.sqrt(spec.area_km2)
        emit(dup, _square(dup.record.station_id, shift, shift, spec.area_km2))

    if with_flatline:
        spec = SyntheticBasinSpec(station_id="FLAT", area_km2=500.0, wet_bias=wet_bias)
        basin = generate_synthetic(spec, n_days, seed=seed * 1000 + 999, start_date=start_date)
        stuck = DailySeries(start_date, np.full(n_days, 1.25))
        flat = basin._replace(record=replace(basin.record, discharge=stuck))
        emit(flat, _square("FLAT", 1600.0, 0.0, spec.area_km2))

    write_attributes_csv(out_dir / "attributes.csv", ATTRIBUTE_NAMES, attributes)
    write_geojson(out_dir / "basins.geojson", geometries)

    raw = {
        "discharge_units": "m3/s",
        "attributes": "attributes.csv",
        "geometries": "basins.geojson",
        "seed": seed,
        "periods": {name: list(bounds) for name, bounds in periods.items()},
        "stations": stations,
        "curation": {"retention_cutoff": periods["finetune"][0]},
        "options": {"n_validation_basins": max(1, n_basins // 3)},
        **(sections if sections is not None else DESK_SECTIONS),
    }
    manifest = RunManifest.from_dict(raw, root=out_dir)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(raw, indent=2))
    logger.info("Wrote %d synthetic stations to %s", len(manifest.stations), out_dir)
    return path
