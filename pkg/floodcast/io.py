"""
File formats: station series and forcing CSVs, attribute tables, basin
GeoJSON, and dataset loading from a run manifest.

Dates are ISO-8601 (YYYY-MM-DD). Missing values are empty fields or the
literal ``NA``.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from floodcast.curation import BasinGeometry
from floodcast.errors import ValidationError
from floodcast.hydrodata import (
    FORCING_VARIABLES,
    DailySeries,
    ForcingSeries,
    ForcingSource,
    StationRecord,
    to_specific_discharge,
)
from floodcast.manifest import RunManifest

logger = logging.getLogger(__name__)

NA_VALUES = ["NA", ""]


def _read_csv(path, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, na_values=NA_VALUES, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"Cannot read '{path}': {exc}") from exc
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationError(f"'{path}' lacks columns {missing}.")
    try:
        frame["date"] = pd.to_datetime(frame["date"], format="%Y-%m-%d")
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"'{path}' has malformed dates: {exc}") from exc
    return frame


def read_series_csv(path) -> DailySeries:
    """Read a ``date,value`` CSV into a DailySeries; gaps become missing"""
    frame = _read_csv(path, ["date", "value"])
    try:
        return DailySeries.from_pandas(frame.set_index("date")["value"].astype(float))
    except ValidationError as exc:
        raise ValidationError(f"'{path}': {exc}") from exc


def write_series_csv(path, series: DailySeries):
    frame = pd.DataFrame({"date": pd.DatetimeIndex(series.dates).strftime("%Y-%m-%d"), "value": series.values})
    frame.to_csv(path, index=False, na_rep="")


def read_reanalysis_csv(path) -> ForcingSeries:
    """Read a ``date,SSR,STR,SP,T2M,TP`` CSV"""
    frame = _read_csv(path, ["date", *FORCING_VARIABLES]).set_index("date")
    try:
        return ForcingSeries(
            ForcingSource.REANALYSIS,
            0,
            {name: DailySeries.from_pandas(frame[name].astype(float)) for name in FORCING_VARIABLES},
        )
    except ValidationError as exc:
        raise ValidationError(f"'{path}': {exc}") from exc


def read_forecast_csv(path) -> Dict[int, ForcingSeries]:
    """
    Read a long-format ``date,lead_time,SSR,STR,SP,T2M,TP`` CSV, where
    ``date`` is the valid date. Returns one ForcingSeries per lead time.
    """
    frame = _read_csv(path, ["date", "lead_time", *FORCING_VARIABLES])
    out = {}
    for lead, group in frame.groupby("lead_time", sort=True):
        lead = int(lead)
        group = group.set_index("date")
        try:
            out[lead] = ForcingSeries(
                ForcingSource.FORECAST_CONTROL,
                lead,
                {name: DailySeries.from_pandas(group[name].astype(float)) for name in FORCING_VARIABLES},
            )
        except ValidationError as exc:
            raise ValidationError(f"'{path}' lead time {lead}: {exc}") from exc
    return out


def _forcing_frame(forcing: ForcingSeries) -> pd.DataFrame:
    frame = pd.DataFrame(forcing.matrix(), columns=list(FORCING_VARIABLES))
    dates = np.datetime64(forcing.start_date, "D") + np.arange(len(forcing))
    frame.insert(0, "date", pd.DatetimeIndex(dates).strftime("%Y-%m-%d"))
    return frame


def write_reanalysis_csv(path, forcing: ForcingSeries):
    _forcing_frame(forcing).to_csv(path, index=False, na_rep="")


def write_forecast_csv(path, forecasts: Mapping[int, ForcingSeries]):
    frames = []
    for lead in sorted(forecasts):
        frame = _forcing_frame(forecasts[lead])
        frame.insert(1, "lead_time", lead)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, na_rep="")


def read_attributes_csv(path) -> Tuple[Tuple[str, ...], Dict[str, np.ndarray]]:
    """
    Read the static attribute table. All columns except ``station_id`` are
    attributes, in file order.
    """
    try:
        frame = pd.read_csv(path, na_values=NA_VALUES, keep_default_na=False, dtype={"station_id": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"Cannot read '{path}': {exc}") from exc
    if "station_id" not in frame.columns:
        raise ValidationError(f"'{path}' lacks a 'station_id' column.")
    frame = frame.set_index("station_id")
    if frame.index.has_duplicates:
        raise ValidationError(f"'{path}' lists a station twice.")
    names = tuple(str(c) for c in frame.columns)
    values = frame.astype(float).to_numpy()
    return names, {station_id: values[i] for i, station_id in enumerate(frame.index)}


def write_attributes_csv(path, names: Sequence[str], attributes: Mapping[str, np.ndarray]):
    frame = pd.DataFrame.from_dict({k: list(v) for k, v in attributes.items()}, orient="index", columns=list(names))
    frame.index.name = "station_id"
    frame.sort_index().to_csv(path, na_rep="")


def read_geojson(path) -> Dict[str, BasinGeometry]:
    """Read a FeatureCollection of Polygon or single-part MultiPolygon basins"""
    try:
        collection = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"Cannot read '{path}': {exc}") from exc
    if collection.get("type") != "FeatureCollection":
        raise ValidationError(f"'{path}' is not a GeoJSON FeatureCollection.")
    out = {}
    for feature in collection["features"]:
        station_id = str(feature.get("properties", {}).get("station_id", ""))
        if not station_id:
            raise ValidationError(f"'{path}' has a feature without 'station_id'.")
        geometry = feature["geometry"]
        coordinates = geometry["coordinates"]
        if geometry["type"] == "MultiPolygon":
            if len(coordinates) != 1:
                raise ValidationError(f"Basin '{station_id}' is a multi-part polygon.")
            coordinates = coordinates[0]
        elif geometry["type"] != "Polygon":
            raise ValidationError(f"Basin '{station_id}' has unsupported geometry '{geometry['type']}'.")
        out[station_id] = BasinGeometry(station_id, tuple(tuple(map(tuple, ring)) for ring in coordinates))
    return out


def write_geojson(path, geometries: Mapping[str, BasinGeometry]):
    collection = {
        "type": "FeatureCollection",
        "features": [geometries[k].to_geojson() for k in sorted(geometries)],
    }
    Path(path).write_text(json.dumps(collection))


@dataclass
class Dataset:
    """
    Everything loaded for a run.

    Parameters
    ----------
    records: dict
        Station id -> StationRecord (specific discharge, mm/d).
    attribute_names: tuple of str
        Names of the static attributes in ``static_attrs`` order.
    reanalysis: dict
        Station id -> reanalysis ForcingSeries.
    forecasts: dict
        Station id -> {lead time -> forecast ForcingSeries}.
    geometries: dict
        Station id -> BasinGeometry.
    """

    records: Dict[str, StationRecord]
    attribute_names: Tuple[str, ...] = ()
    reanalysis: Dict[str, ForcingSeries] = field(default_factory=dict)
    forecasts: Dict[str, Dict[int, ForcingSeries]] = field(default_factory=dict)
    geometries: Dict[str, BasinGeometry] = field(default_factory=dict)

    @property
    def station_ids(self):
        return sorted(self.records)

    def subset(self, station_ids) -> "Dataset":
        keep = set(station_ids)
        return Dataset(
            {k: v for k, v in self.records.items() if k in keep},
            self.attribute_names,
            {k: v for k, v in self.reanalysis.items() if k in keep},
            {k: v for k, v in self.forecasts.items() if k in keep},
            {k: v for k, v in self.geometries.items() if k in keep},
        )

    def forcing(self, station_id: str, lead_time: int = 0) -> ForcingSeries:
        if lead_time == 0:
            if station_id not in self.reanalysis:
                raise ValidationError(f"No reanalysis forcing for station '{station_id}'.")
            return self.reanalysis[station_id]
        try:
            return self.forecasts[station_id][lead_time]
        except KeyError:
            raise ValidationError(f"No lead-time {lead_time} forecast for station '{station_id}'.") from None


def load_dataset(
    manifest: RunManifest,
    station_ids: Optional[Sequence[str]] = None,
    forcings: bool = True,
    threads: int = 1,
) -> Dataset:
    """
    Load stations (and optionally their forcings) listed in the manifest.
    Stations load independently and may be read in parallel.
    """
    if station_ids is None:
        station_ids = manifest.station_ids
    attribute_names, attributes = (), {}
    if manifest.attributes is not None:
        attribute_names, attributes = read_attributes_csv(manifest.attributes)

    def load(station_id):
        entry = manifest.station(station_id)
        discharge = read_series_csv(entry.discharge)
        if manifest.discharge_units == "m3/s":
            discharge = discharge.map(lambda v: to_specific_discharge(v, entry.area_km2))
        if attribute_names and station_id not in attributes:
            raise ValidationError(f"No static attributes for station '{station_id}'.")
        record = StationRecord(
            station_id,
            entry.area_km2,
            discharge,
            attributes.get(station_id, np.empty(0)),
            entry.utc_offset_hours,
        )
        reanalysis = forecast = None
        if forcings:
            if entry.reanalysis is not None:
                reanalysis = read_reanalysis_csv(entry.reanalysis)
            if entry.forecast is not None:
                forecast = read_forecast_csv(entry.forecast)
        return station_id, record, reanalysis, forecast

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            loaded = list(pool.map(load, station_ids))
    else:
        loaded = [load(s) for s in station_ids]

    dataset = Dataset({}, attribute_names)
    for station_id, record, reanalysis, forecast in loaded:
        dataset.records[station_id] = record
        if reanalysis is not None:
            dataset.reanalysis[station_id] = reanalysis
        if forecast is not None:
            dataset.forecasts[station_id] = forecast
    if manifest.geometries is not None:
        geometries = read_geojson(manifest.geometries)
        dataset.geometries = {k: v for k, v in geometries.items() if k in dataset.records}
    logger.info("Loaded %d stations", len(dataset.records))
    return dataset
