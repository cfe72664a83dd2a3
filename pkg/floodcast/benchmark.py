"""
Paired comparison of two skill tables (two models, or one model before and
after fine-tuning) over their shared stations.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
import pandas as pd

from floodcast.errors import ValidationError
from floodcast.metrics import SKILL_METRICS

logger = logging.getLogger(__name__)

AREA_CLASSES = (("<1000", 0.0, 1_000.0), ("1000-10000", 1_000.0, 10_000.0), (">10000", 10_000.0, np.inf))
SIGNIFICANT_CHANGE = 0.1


class Winner(str, Enum):
    A = "a"
    B = "b"
    TIE = "tie"
    UNDEFINED = "undefined"


@dataclass(frozen=True)
class BenchmarkRow:
    station_id: str
    value_a: Optional[float]
    value_b: Optional[float]
    delta: Optional[float]
    winner: Winner
    area_km2: Optional[float] = None


def _none(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return None if np.isnan(value) else value


def _clean(obj):
    """Recursively turn NaN into None so the summary is valid JSON"""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _none(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def read_skill_csv(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, na_values=["NA", ""], keep_default_na=False, dtype={"station_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"Cannot read skill table '{path}': {exc}") from exc
    if "station_id" not in frame.columns:
        raise ValidationError(f"'{path}' lacks a 'station_id' column.")
    return frame


def _select_lead(frame: pd.DataFrame, lead_time: Optional[int]) -> pd.DataFrame:
    if "lead_time" in frame.columns and lead_time is not None:
        frame = frame[frame["lead_time"] == lead_time]
    if frame["station_id"].duplicated().any():
        raise ValidationError("Skill table lists a station more than once; select a lead time.")
    return frame.set_index("station_id")


def _join(results_a: pd.DataFrame, results_b: pd.DataFrame, lead_time: Optional[int]) -> pd.DataFrame:
    a = _select_lead(results_a, lead_time)
    b = _select_lead(results_b, lead_time)
    joined = a.join(b, how="inner", lsuffix="_a", rsuffix="_b")
    if joined.empty:
        raise ValidationError("The two skill tables share no station.")
    return joined.sort_index()


def _iqr(values: pd.Series) -> Optional[float]:
    values = values.dropna()
    if values.empty:
        return None
    return float(values.quantile(0.75) - values.quantile(0.25))


def _median(values: pd.Series) -> Optional[float]:
    return _none(values.median()) if values.notna().any() else None


def _win_fractions(winners: pd.Series) -> Dict[str, object]:
    counts = {w.value: int((winners == w.value).sum()) for w in Winner}
    decided = len(winners) - counts[Winner.UNDEFINED.value]
    fractions = {
        w.value: (counts[w.value] / decided if decided else None) for w in (Winner.A, Winner.B, Winner.TIE)
    }
    return {"counts": counts, "fractions": fractions}


@dataclass
class BenchmarkResult:
    rows: pd.DataFrame
    summary: dict

    def row_objects(self):
        return [
            BenchmarkRow(
                station_id,
                _none(row["value_a"]),
                _none(row["value_b"]),
                _none(row["delta"]),
                Winner(row["winner"]),
                _none(row["area_km2"]),
            )
            for station_id, row in self.rows.iterrows()
        ]

    def save(self, rows_path, summary_path):
        self.rows.to_csv(rows_path, na_rep="")
        Path(summary_path).write_text(json.dumps(_clean(self.summary), indent=2))


def benchmark_compare(
    results_a: pd.DataFrame,
    results_b: pd.DataFrame,
    metric: str = "kge_prime",
    areas: Optional[Mapping[str, float]] = None,
    lead_time: Optional[int] = 1,
    tie_tolerance: float = 0.0,
) -> BenchmarkResult:
    """
    Compare two per-station skill tables.

    Parameters
    ----------
    results_a, results_b: pd.DataFrame
        Skill tables with a ``station_id`` column and one column per metric.
    metric: str
        Metric deciding the per-station winner (higher is better).
    areas: mapping or None
        Station id -> drainage area, km2, for the area-class breakdown.
    lead_time: int or None
        Lead time to compare when the tables carry a ``lead_time`` column.
    tie_tolerance: float
        Deltas within this tolerance count as ties.

    Returns
    -------
    BenchmarkResult
        Per-station rows (``value_a``, ``value_b``, ``delta = a - b``,
        ``winner``, ``area_km2``) and a summary with medians per metric,
        win counts, the set of stations where A fails (metric < 0) and an
        area-class breakdown.
    """
    if metric not in SKILL_METRICS:
        raise ValidationError(f"Unknown metric '{metric}'.")
    joined = _join(results_a, results_b, lead_time)
    if f"{metric}_a" not in joined or f"{metric}_b" not in joined:
        raise ValidationError(f"Both skill tables need a '{metric}' column.")

    rows = pd.DataFrame(index=joined.index)
    rows["value_a"] = joined[f"{metric}_a"].astype(float)
    rows["value_b"] = joined[f"{metric}_b"].astype(float)
    rows["delta"] = rows["value_a"] - rows["value_b"]
    rows["winner"] = np.select(
        [rows["delta"].isna(), rows["delta"] > tie_tolerance, rows["delta"] < -tie_tolerance],
        [Winner.UNDEFINED.value, Winner.A.value, Winner.B.value],
        default=Winner.TIE.value,
    )
    areas = areas or {}
    rows["area_km2"] = [areas.get(s, np.nan) for s in rows.index]

    medians = {}
    for name in SKILL_METRICS:
        if f"{name}_a" not in joined or f"{name}_b" not in joined:
            continue
        a, b = joined[f"{name}_a"].astype(float), joined[f"{name}_b"].astype(float)
        medians[name] = {"a": _median(a), "b": _median(b), "delta": _median(a - b)}

    failing = rows["value_a"] < 0
    n_failing = int(failing.sum())
    also = int((failing & (rows["value_b"] < 0)).sum())

    area_classes = {}
    for label, low, high in AREA_CLASSES:
        members = rows[(rows["area_km2"] >= low) & (rows["area_km2"] < high)]
        area_classes[label] = _area_summary(members)
    unknown = rows[rows["area_km2"].isna()]
    if not unknown.empty:
        area_classes["unknown"] = _area_summary(unknown)

    summary = {
        "metric": metric,
        "lead_time": lead_time,
        "n_stations": int(len(rows)),
        "medians": medians,
        "wins": _win_fractions(rows["winner"]),
        "failure_set": {
            "a_negative": n_failing,
            "also_b_negative": also,
            "fraction": also / n_failing if n_failing else None,
        },
        "area_classes": area_classes,
    }
    logger.info(
        "Benchmark on %d stations: median %s %s vs %s",
        len(rows), metric, medians[metric]["a"], medians[metric]["b"],
    )
    return BenchmarkResult(rows, summary)


def _area_summary(members: pd.DataFrame) -> dict:
    wins = _win_fractions(members["winner"])
    return {
        "count": int(len(members)),
        "median_a": _median(members["value_a"]),
        "median_b": _median(members["value_b"]),
        "iqr_a": _iqr(members["value_a"]),
        "iqr_b": _iqr(members["value_b"]),
        "win_fraction_a": wins["fractions"][Winner.A.value],
    }


def finetune_impact(pretrained: pd.DataFrame, finetuned: pd.DataFrame, lead_time: Optional[int] = 1) -> dict:
    """
    Change in KGE' and NSE from fine-tuning, on the stations both tables
    share: central tendencies before and after, and how many stations gained
    or lost more than 0.1.
    """
    joined = _join(finetuned, pretrained, lead_time)
    out = {"n_stations": int(len(joined))}
    for name in ("kge_prime", "nse"):
        after = joined[f"{name}_a"].astype(float)
        before = joined[f"{name}_b"].astype(float)
        delta = (after - before).dropna()
        n = len(delta)
        gains = delta[delta > SIGNIFICANT_CHANGE]
        out[name] = {
            "mean_before": _none(before.mean()),
            "mean_after": _none(after.mean()),
            "median_before": _median(before),
            "median_after": _median(after),
            "median_delta": _median(delta),
            "mean_delta": _none(delta.mean()) if n else None,
            "fraction_improved": float((delta > 0).mean()) if n else None,
            "fraction_gain_above": float(len(gains) / n) if n else None,
            "fraction_decline_below": float((delta < -SIGNIFICANT_CHANGE).mean()) if n else None,
            "mean_significant_gain": _none(gains.mean()) if len(gains) else None,
        }
    return out
