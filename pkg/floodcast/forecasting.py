"""
Windowed inference. For an issue date ``d`` the model sees the ``window``
days ending at ``d + horizon``; horizon step ``k`` is the prediction valid
on ``d + k``.

In forecast mode the final ``horizon`` steps carry forecast forcings, step
``k`` taking lead time ``min(k, max lead)``, and the hindcast steps carry
either lead-time-1 forecasts or the reanalysis. In reanalysis mode every
step carries the reanalysis, which turns the model into a simulator.
"""

import datetime
import logging
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import pandas as pd
import torch

from floodcast.errors import ValidationError
from floodcast.hydrodata import TARGET_NAME, DailySeries, Period
from floodcast.io import Dataset
from floodcast.training import ModelState, dynamic_inputs, static_inputs

logger = logging.getLogger(__name__)

MODES = ("forecast", "reanalysis")
HINDCAST_SOURCES = ("forecast", "reanalysis")


def predict(
    state: ModelState,
    data: Dataset,
    station_id: str,
    period,
    mode: str = "forecast",
    hindcast_source: str = "forecast",
    batch_size: int = 256,
) -> Dict[int, DailySeries]:
    """
    Predict discharge for one station.

    Parameters
    ----------
    state: ModelState
        Trained model and its scaler.
    data: Dataset
        Station record and forcings.
    station_id: str
        Station to predict.
    period: Period
        Valid dates to cover.
    mode: str
        ``"forecast"`` or ``"reanalysis"``.
    hindcast_source: str
        Forcing of the hindcast steps in forecast mode, ``"forecast"``
        (lead time 1) or ``"reanalysis"``.
    batch_size: int
        Issue dates per forward pass.

    Returns
    -------
    dict
        Lead time (1..horizon) -> specific discharge in mm/d over ``period``,
        clamped at zero. Dates whose window lacks an input are missing.
    """
    if mode not in MODES:
        raise NotImplementedError(f"Unknown prediction mode '{mode}'")
    if hindcast_source not in HINDCAST_SOURCES:
        raise NotImplementedError(f"Unknown hindcast source '{hindcast_source}'")
    if tuple(data.attribute_names) != tuple(state.attribute_names):
        raise ValidationError("Static attributes differ from the ones the model was trained with.")
    period = Period.parse(period)
    cfg = state.model_config
    window, horizon = cfg.window, cfg.horizon
    n_hindcast = window - horizon
    scaler = state.scaler
    record = data.records[station_id]

    first_issue = period.start - datetime.timedelta(days=horizon)
    n_issues = (period.end - first_issue).days
    grid_start = first_issue - datetime.timedelta(days=n_hindcast - 1)
    n_grid = n_issues + window - 1

    def scaled(lead_time):
        forcing = data.forcing(station_id, lead_time).reindex(grid_start, n_grid)
        return dynamic_inputs(scaler, forcing.matrix(), grid_start)

    if mode == "reanalysis":
        hindcast = scaled(0)
        future = {k: hindcast for k in range(1, horizon + 1)}
    else:
        leads = sorted(data.forecasts.get(station_id, {}))
        if not leads:
            raise ValidationError(f"No forecasts for station '{station_id}'.")
        by_lead = {lead: scaled(lead) for lead in leads}
        hindcast = by_lead[1] if hindcast_source == "forecast" else scaled(0)
        future = {k: by_lead[min(k, leads[-1])] for k in range(1, horizon + 1)}

    rows = np.arange(window)
    dynamic = np.empty((n_issues, window, hindcast.shape[1]))
    for j in range(n_issues):
        dynamic[j, :n_hindcast] = hindcast[j + rows[:n_hindcast]]
        for k in range(1, horizon + 1):
            dynamic[j, n_hindcast + k - 1] = future[k][j + n_hindcast + k - 1]
    complete = np.isfinite(dynamic).all(axis=(1, 2))

    static = static_inputs(scaler, data.attribute_names, record)
    if not np.isfinite(static).all():
        raise ValidationError(f"Station '{station_id}' has missing static attributes.")

    out = np.full((n_issues, horizon), np.nan)
    model = state.model
    was_training = model.training
    model.eval()
    todo = np.flatnonzero(complete)
    with torch.no_grad():
        for start in range(0, todo.size, batch_size):
            idx = todo[start : start + batch_size]
            x = torch.as_tensor(dynamic[idx], dtype=state.dtype)
            s = torch.as_tensor(np.repeat(static[None], idx.size, axis=0), dtype=state.dtype)
            out[idx] = model(x, s).double().numpy()
    model.train(was_training)
    if todo.size < n_issues:
        logger.debug("Station %s: %d issue dates lack inputs", station_id, n_issues - todo.size)

    discharge = np.maximum(scaler.inverse_transform(TARGET_NAME, out), 0.0)
    return {
        k: DailySeries(first_issue + datetime.timedelta(days=k), discharge[:, k - 1]).slice(period.start, period.end)
        for k in range(1, horizon + 1)
    }


def write_predictions_csv(path, predictions: Mapping[int, DailySeries]) -> Path:
    frames = []
    for lead in sorted(predictions):
        series = predictions[lead]
        frames.append(
            pd.DataFrame(
                {
                    "date": pd.DatetimeIndex(series.dates).strftime("%Y-%m-%d"),
                    "lead_time": lead,
                    "value": series.values,
                }
            )
        )
    path = Path(path)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, na_rep="")
    return path


def read_predictions_csv(path) -> Dict[int, DailySeries]:
    try:
        frame = pd.read_csv(path, na_values=["NA", ""], keep_default_na=False, parse_dates=["date"])
    except (OSError, ValueError) as exc:
        raise ValidationError(f"Cannot read predictions '{path}': {exc}") from exc
    return {
        int(lead): DailySeries.from_pandas(group.set_index("date")["value"].astype(float))
        for lead, group in frame.groupby("lead_time", sort=True)
    }
