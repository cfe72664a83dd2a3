"""
End-to-end run: curation, scaler fit, pre-training, fine-tuning,
prediction, evaluation, forcing-shift diagnostics, flood thresholds, event
verification and benchmarking.

Every stage writes into its own directory under the run directory, next to
a ``_stage.json`` record holding the stage's cache key. The key hashes the
stage name, its configuration, the seed, the content of the input files
the stage reads and the keys of its upstream stages. A stage whose key is
unchanged is skipped, so changing one input re-runs exactly the stages
that depend on it.
"""

import datetime
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from floodcast import extremes, metrics
from floodcast.benchmark import benchmark_compare, finetune_impact, read_skill_csv
from floodcast.curation import CurationConfig, curate
from floodcast.errors import StageError, ValidationError
from floodcast.forecasting import predict, read_predictions_csv, write_predictions_csv
from floodcast.hydrodata import DailySeries, Period, ScalerStats, StationRecord, fit_scaler
from floodcast.io import Dataset, load_dataset
from floodcast.layers import ModelConfig
from floodcast.manifest import RunManifest
from floodcast.training import ModelState, SequenceDataset, TrainConfig, finetune, pretrain

logger = logging.getLogger(__name__)

STAGES = (
    "curate",
    "scaler",
    "pretrain",
    "finetune",
    "predict",
    "evaluate",
    "forcing-shift",
    "thresholds",
    "verify-events",
    "benchmark",
)

UPSTREAM = {
    "curate": (),
    "scaler": ("curate",),
    "pretrain": ("scaler",),
    "finetune": ("pretrain",),
    "predict": ("pretrain", "finetune"),
    "evaluate": ("predict",),
    "forcing-shift": ("curate",),
    "thresholds": ("predict",),
    "verify-events": ("predict", "thresholds"),
    "benchmark": ("evaluate",),
}

# Files each stage reads directly.
INPUTS = {
    "curate": ("discharge", "geometries"),
    "scaler": ("discharge", "reanalysis", "attributes"),
    "pretrain": ("discharge", "reanalysis", "attributes"),
    "finetune": ("discharge", "forecast", "attributes"),
    "predict": ("reanalysis", "forecast", "attributes"),
    "evaluate": ("discharge",),
    "forcing-shift": ("reanalysis", "forecast"),
    "thresholds": ("discharge",),
    "verify-events": ("discharge",),
    "benchmark": (),
}

MODELS = ("pretrained", "finetuned")
STAGE_RECORD = "_stage.json"


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_ids(path: Path, ids: Iterable[str]):
    path.write_text("".join(f"{s}\n" for s in ids))


def _read_ids(path: Path) -> List[str]:
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))


def dependents(stage: str) -> List[str]:
    """Stages that must run for ``stage``, in execution order, itself included"""
    if stage not in UPSTREAM:
        raise ValidationError(f"Unknown stage '{stage}'.")
    needed = set()

    def visit(name):
        if name not in needed:
            needed.add(name)
            for parent in UPSTREAM[name]:
                visit(parent)

    visit(stage)
    return [s for s in STAGES if s in needed]


def read_predictions_dir(directory) -> Dict[str, Dict[int, DailySeries]]:
    """``<station_id>.csv`` prediction files of one directory"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"'{directory}' is not a directory.")
    return {path.stem: read_predictions_csv(path) for path in sorted(directory.glob("*.csv"))}


def skill_table(
    predictions: Mapping[str, Mapping[int, DailySeries]],
    records: Mapping[str, StationRecord],
    period: Period,
    max_lead: Optional[Callable[[str], int]] = None,
) -> pd.DataFrame:
    """
    Per-station, per-lead skill against observations over ``period``.
    Lead times beyond ``max_lead(station_id)`` are left out.
    """
    rows = []
    for station_id, by_lead in sorted(predictions.items()):
        if station_id not in records:
            raise ValidationError(f"Predictions for unknown station '{station_id}'.")
        obs = records[station_id].discharge.slice(period.start, period.end)
        for lead, series in sorted(by_lead.items()):
            if max_lead is not None and lead > max_lead(station_id):
                continue
            report = metrics.series_skill(obs, series.slice(period.start, period.end))
            rows.append({"station_id": station_id, "lead_time": lead, **report.to_dict()})
    return pd.DataFrame(rows, columns=["station_id", "lead_time", *metrics.SKILL_METRICS, "n"])


def write_skill_reports(directory, name: str, table: pd.DataFrame):
    """``skill_<name>.csv``, per-lead ``summary_<name>.json`` and lead-1 ``ecdf_<name>.csv``"""
    directory = Path(directory)
    table.to_csv(directory / f"skill_{name}.csv", index=False, na_rep="")

    summary = {}
    for lead, group in table.groupby("lead_time", sort=True):
        summary[str(int(lead))] = {
            metric: metrics.summarize(group[metric].astype(float).tolist()) for metric in metrics.SKILL_METRICS
        }
    _write_json(directory / f"summary_{name}.json", summary)

    rows = []
    lead_one = table[table["lead_time"] == 1]
    for metric in ("kge_prime", "nse"):
        values, probability = metrics.ecdf(lead_one[metric].astype(float).tolist())
        rows.extend({"metric": metric, "value": v, "probability": p} for v, p in zip(values, probability))
    pd.DataFrame(rows, columns=["metric", "value", "probability"]).to_csv(directory / f"ecdf_{name}.csv", index=False)


class Pipeline:
    """
    Parameters
    ----------
    manifest: RunManifest
        Dataset, periods and configuration sections.
    out_dir: Path
        Run directory. Each stage owns a subdirectory.
    force: bool
        Ignore cached stage results.
    """

    def __init__(self, manifest: RunManifest, out_dir, force: bool = False):
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.force = force
        self.threads = int(manifest.option("threads"))
        self.dtype = {"float32": torch.float32, "float64": torch.float64}.get(manifest.option("dtype"))
        if self.dtype is None:
            raise ValidationError(f"Unsupported dtype '{manifest.option('dtype')}'.")
        self.keys: Dict[str, str] = {}
        self.executed: List[str] = []
        self._data: Optional[Dataset] = None
        self._digests: Dict[Path, str] = {}

    @property
    def data(self) -> Dataset:
        if self._data is None:
            self._data = load_dataset(self.manifest, threads=self.threads)
        return self._data

    def stage_dir(self, stage: str) -> Path:
        return self.out_dir / stage

    # ------------------------------------------------------------------ config

    @property
    def periods(self) -> Dict[str, Period]:
        return dict(self.manifest.periods)

    def model_config(self) -> ModelConfig:
        n_static = len(self.data.attribute_names) + 1
        return ModelConfig.from_dict({**self.manifest.section("model"), "n_static": n_static})

    def train_config(self, stage: str) -> TrainConfig:
        if stage == "pretrain":
            return TrainConfig.from_dict(self.manifest.section("pretrain"), TrainConfig.pretrain_defaults())
        return TrainConfig.from_dict(self.manifest.section("finetune"), TrainConfig.finetune_defaults())

    def extremes_config(self) -> extremes.ExtremesConfig:
        section = self.manifest.section("extremes")
        section.setdefault("aggregate_lead_times", bool(self.manifest.option("aggregate_lead_times")))
        return extremes.ExtremesConfig.from_dict(section)

    def stage_config(self, stage: str) -> dict:
        m = self.manifest
        periods = {k: v.to_list() for k, v in m.periods.items()}
        config = {
            "curate": {"curation": m.section("curation")},
            "scaler": {"period": periods["pretrain"], "n_validation_basins": m.option("n_validation_basins")},
            "pretrain": {
                "model": m.section("model"),
                "train": m.section("pretrain"),
                "dtype": m.option("dtype"),
                "periods": [periods["pretrain"], periods["validation"]],
            },
            "finetune": {
                "train": m.section("finetune"),
                "reuse_basin_sigma": m.option("reuse_basin_sigma"),
                "periods": [periods["finetune"], periods["validation"]],
            },
            "predict": {"hindcast_source": m.option("hindcast_source"), "period": periods["test"]},
            "evaluate": {"period": periods["test"]},
            "forcing-shift": {"paired_wet_days": m.option("paired_wet_days"), "period": periods["finetune"]},
            "thresholds": {"extremes": m.section("extremes")},
            "verify-events": {
                "extremes": m.section("extremes"),
                "aggregate_lead_times": m.option("aggregate_lead_times"),
                "period": periods["test"],
            },
            "benchmark": {},
        }[stage]
        config["stations"] = [
            {"station_id": s.station_id, "area_km2": s.area_km2, "utc_offset_hours": s.utc_offset_hours}
            for s in sorted(m.stations, key=lambda s: s.station_id)
        ]
        config["discharge_units"] = m.discharge_units
        return config

    # ------------------------------------------------------------------- cache

    def _digest(self, path) -> str:
        path = Path(path)
        if path not in self._digests:
            self._digests[path] = file_digest(path)
        return self._digests[path]

    def _input_digests(self, stage: str) -> dict:
        m = self.manifest
        out = {}
        for kind in INPUTS[stage]:
            if kind in ("attributes", "geometries"):
                path = getattr(m, kind)
                out[kind] = None if path is None else self._digest(path)
                continue
            out[kind] = {
                s.station_id: (None if getattr(s, kind) is None else self._digest(getattr(s, kind)))
                for s in sorted(m.stations, key=lambda s: s.station_id)
            }
        return out

    def stage_key(self, stage: str) -> str:
        payload = {
            "stage": stage,
            "config": self.stage_config(stage),
            "seed": self.manifest.seed,
            "inputs": self._input_digests(stage),
            "upstream": {name: self.keys[name] for name in UPSTREAM[stage]},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def _cached(self, stage: str, key: str) -> bool:
        record = self.stage_dir(stage) / STAGE_RECORD
        if self.force or not record.exists():
            return False
        try:
            return json.loads(record.read_text()).get("key") == key
        except json.JSONDecodeError:
            return False

    def run(self, stages: Optional[Sequence[str]] = None) -> Path:
        """
        Execute ``stages`` (default: all) and whatever they depend on.

        Returns
        -------
        Path
            The run directory.
        """
        wanted = set()
        for stage in stages or STAGES:
            wanted.update(dependents(stage))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(max(1, self.threads))
        for stage in (s for s in STAGES if s in wanted):
            self._run_stage(stage)
        return self.out_dir

    def _run_stage(self, stage: str):
        key = self.stage_key(stage)
        self.keys[stage] = key
        if self._cached(stage, key):
            logger.info("Stage %s: cache hit", stage)
            return
        logger.info("Stage %s: running", stage)
        directory = self.stage_dir(stage)
        record = directory / STAGE_RECORD
        if record.exists():
            record.unlink()
        directory.mkdir(parents=True, exist_ok=True)
        runner: Callable[[Path], None] = getattr(self, "_" + stage.replace("-", "_"))
        try:
            runner(directory)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, str(exc)) from exc
        _write_json(record, {"stage": stage, "key": key, "finished": datetime.datetime.now().isoformat()})
        self.executed.append(stage)

    # ------------------------------------------------------------------ stages

    def retained(self) -> List[str]:
        return _read_ids(self.stage_dir("curate") / "retained.txt")

    def validation_basins(self) -> List[str]:
        return _read_ids(self.stage_dir("scaler") / "validation_basins.txt")

    def scaler(self) -> ScalerStats:
        return ScalerStats.from_dict(json.loads((self.stage_dir("scaler") / "scaler.json").read_text()))

    def _curate(self, directory: Path):
        data = self.data
        config = CurationConfig.from_dict(self.manifest.section("curation"))
        result = curate(data.records, data.geometries, config, self.threads)
        _write_ids(directory / "retained.txt", result.retained)
        pd.DataFrame(
            [(v.id_a, v.id_b, v.overlap_fraction, v.kge, v.verdict.value) for v in result.verdicts],
            columns=["id_a", "id_b", "overlap_fraction", "kge", "verdict"],
        ).to_csv(directory / "pairs.csv", index=False, na_rep="")
        removals = [(e.station_id, e.reason, e.related) for e in result.resolution.removed + result.resolution.conflicts]
        for station_id, reasons in result.qc.rejections.items():
            removals.extend((station_id, reason, value) for reason, value in reasons)
        pd.DataFrame(removals, columns=["station_id", "reason", "related"]).to_csv(
            directory / "removals.csv", index=False, na_rep=""
        )
        logger.info("Curation keeps %d of %d stations", len(result.retained), len(data.records))

    def _scaler(self, directory: Path):
        data = self.data.subset(self.retained())
        if not data.records:
            raise ValidationError("No station survived curation.")
        stats = fit_scaler(
            [data.records[s] for s in data.station_ids],
            data.reanalysis,
            self.periods["pretrain"],
            data.attribute_names,
        )
        _write_json(directory / "scaler.json", stats.to_dict())
        n = int(self.manifest.option("n_validation_basins"))
        _write_ids(directory / "validation_basins.txt", data.station_ids[:n])

    def _datasets(self, stage: str, model_config: ModelConfig, scaler: ScalerStats, basin_sigma=None):
        lead_time = 0 if stage == "pretrain" else 1
        data = self.data.subset(self.retained())
        train = SequenceDataset(
            data, scaler, self.periods[stage], model_config, lead_time, basin_sigma=basin_sigma, dtype=self.dtype
        )
        validation = SequenceDataset(
            data,
            scaler,
            self.periods["validation"],
            model_config,
            lead_time,
            station_ids=[s for s in self.validation_basins() if s in data.records],
            basin_sigma=basin_sigma,
            dtype=self.dtype,
        )
        return train, validation

    def _pretrain(self, directory: Path):
        model_config = self.model_config()
        scaler = self.scaler()
        train, validation = self._datasets("pretrain", model_config, scaler)
        state = pretrain(
            train,
            validation,
            model_config,
            scaler,
            self.data.attribute_names,
            self.train_config("pretrain"),
            seed=self.manifest.seed,
        )
        state.save(directory / "model.pt")
        _write_json(directory / "history.json", state.history)

    def _finetune(self, directory: Path):
        state = ModelState.load(self.stage_dir("pretrain") / "model.pt")
        basin_sigma = None
        if not self.manifest.option("reuse_basin_sigma"):
            period = self.periods["finetune"]
            basin_sigma = {}
            for station_id in self.retained():
                obs = self.data.records[station_id].discharge.slice(period.start, period.end).values
                obs = obs[~np.isnan(obs)]
                if obs.size:
                    basin_sigma[station_id] = float(obs.std())
        train, validation = self._datasets("finetune", state.model_config, state.scaler, basin_sigma)
        tuned = finetune(state, train, validation, self.train_config("finetune"), seed=self.manifest.seed)
        tuned.save(directory / "model.pt")
        _write_json(directory / "history.json", tuned.history)

    def _predict(self, directory: Path):
        hindcast_source = self.manifest.option("hindcast_source")
        test = self.periods["test"]
        data = self.data
        for name in MODELS:
            stage = "pretrain" if name == "pretrained" else "finetune"
            state = ModelState.load(self.stage_dir(stage) / "model.pt")
            (directory / name).mkdir(exist_ok=True)
            for station_id in self.retained():
                if station_id not in data.forecasts:
                    logger.warning("Station %s has no forecasts; skipped", station_id)
                    continue
                predictions = predict(state, data, station_id, test, "forecast", hindcast_source)
                write_predictions_csv(directory / name / f"{station_id}.csv", predictions)
            if name == "finetuned":
                (directory / "simulation").mkdir(exist_ok=True)
                for station_id in self.retained():
                    record = data.records[station_id]
                    full = Period(record.discharge.start_date, record.discharge.end_date)
                    simulation = predict(state, data, station_id, full, "reanalysis")
                    write_predictions_csv(directory / "simulation" / f"{station_id}.csv", {1: simulation[1]})

    def _predictions(self, name: str) -> Dict[str, Dict[int, DailySeries]]:
        return read_predictions_dir(self.stage_dir("predict") / name)

    def _evaluate(self, directory: Path):
        test = self.periods["test"]
        records = self.data.records
        for name in MODELS + ("simulation",):
            max_lead = None if name == "simulation" else self._max_lead
            table = skill_table(self._predictions(name), records, test, max_lead)
            write_skill_reports(directory, name, table)

    def _max_lead(self, station_id: str) -> int:
        return max(self.data.forecasts.get(station_id, {0: None}))

    def _forcing_shift(self, directory: Path):
        period = self.periods["finetune"]
        paired = bool(self.manifest.option("paired_wet_days"))
        data = self.data
        rows = []
        for station_id in self.retained():
            if station_id not in data.reanalysis or 1 not in data.forecasts.get(station_id, {}):
                continue
            reference = data.reanalysis[station_id].variables["TP"].slice(period.start, period.end)
            forecast = data.forecasts[station_id][1].variables["TP"].slice(period.start, period.end)
            report = metrics.normalized_w1(reference, forecast, paired=paired)
            rows.append({"station_id": station_id, **report.to_dict()})
        columns = ["station_id", "w1_raw", "w1_normalized", "wet_days_reference", "wet_days_forecast", "reference_mean"]
        table = pd.DataFrame(rows, columns=columns)
        table.to_csv(directory / "w1.csv", index=False, na_rep="")
        summary = metrics.summarize(table["w1_normalized"].astype(float).tolist())
        summary["large_shift_threshold"] = summary.get("q90")
        _write_json(directory / "summary.json", summary)

    def _thresholds(self, directory: Path):
        config = self.extremes_config()
        simulation = {s: by_lead[1] for s, by_lead in self._predictions("simulation").items()}
        observed = {s: self.data.records[s].discharge for s in self.retained()}
        extremes.save_thresholds(
            directory / "thresholds_sim.json",
            extremes.fit_all_thresholds(simulation, extremes.ThresholdSource.SIMULATED, config, self.threads),
        )
        extremes.save_thresholds(
            directory / "thresholds_obs.json",
            extremes.fit_all_thresholds(observed, extremes.ThresholdSource.OBSERVED, config, self.threads),
        )

    def _verify_events(self, directory: Path):
        config = self.extremes_config()
        test = self.periods["test"]
        sim_thresholds = extremes.load_thresholds(self.stage_dir("thresholds") / "thresholds_sim.json")
        obs_thresholds = extremes.load_thresholds(self.stage_dir("thresholds") / "thresholds_obs.json")
        rows, per_lead = [], {}
        for station_id, by_lead in self._predictions("finetuned").items():
            th_sim, th_obs = sim_thresholds.get(station_id), obs_thresholds.get(station_id)
            if th_sim is None or th_obs is None:
                logger.info("Station %s lacks thresholds; excluded from event verification", station_id)
                continue
            obs = self.data.records[station_id].discharge.slice(test.start, test.end)
            for lead, series in sorted(by_lead.items()):
                if lead > self._max_lead(station_id):
                    continue
                tallies = extremes.dual_threshold_verify(
                    series, obs, th_sim, th_obs, config.margin_days, config.return_periods
                )
                per_lead.setdefault(lead, []).append(tallies)
                rows.extend({"station_id": station_id, "lead_time": lead, **t.to_dict()} for t in tallies.values())
        columns = ["station_id", "lead_time", "return_period", "hits", "misses", "false_alarms", "precision", "recall"]
        pd.DataFrame(rows, columns=columns).to_csv(directory / "tallies.csv", index=False, na_rep="")

        if config.aggregate_lead_times:
            total = extremes.aggregate_tallies(t for tallies in per_lead.values() for t in tallies)
            table = extremes.tally_table(total)
        else:
            frames = []
            for lead in sorted(per_lead):
                frame = extremes.tally_table(extremes.aggregate_tallies(per_lead[lead]))
                frame.insert(0, "lead_time", lead)
                frames.append(frame)
            table = pd.concat(frames, ignore_index=True) if frames else extremes.tally_table({})
        table.to_csv(directory / "global_tallies.csv", index=False, na_rep="")

    def _benchmark(self, directory: Path):
        evaluate = self.stage_dir("evaluate")
        finetuned = read_skill_csv(evaluate / "skill_finetuned.csv")
        pretrained = read_skill_csv(evaluate / "skill_pretrained.csv")
        areas = {s.station_id: s.area_km2 for s in self.manifest.stations}
        result = benchmark_compare(finetuned, pretrained, "kge_prime", areas)
        result.save(directory / "rows.csv", directory / "summary.json")
        _write_json(directory / "finetune_impact.json", finetune_impact(pretrained, finetuned))


def run_pipeline(manifest: RunManifest, out_dir, stages: Optional[Sequence[str]] = None, force: bool = False) -> Path:
    """Run the pipeline (or the given stages and their dependencies) and return the run directory"""
    return Pipeline(manifest, out_dir, force).run(stages)
