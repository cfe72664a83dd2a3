import json

import numpy as np
import pandas as pd
import pytest
import torch

from floodcast import pipeline
from floodcast.cli import main
from floodcast.errors import StageError, ValidationError
from floodcast.forecasting import write_predictions_csv
from floodcast.hydrodata import DailySeries, ForcingSeries, Period, StationRecord
from floodcast.io import load_dataset, read_forecast_csv, write_forecast_csv
from floodcast.manifest import RunManifest
from floodcast.pipeline import STAGES, Pipeline, dependents, skill_table, write_skill_reports
from floodcast.synthetic import write_synthetic_dataset

SMALL_SECTIONS = {
    "model": {"hidden_size": 8, "dropout_p": 0.0, "embed_layers": [6, 4], "window": 30, "horizon": 5},
    "pretrain": {
        "lr_init": 5e-3,
        "epochs": 2,
        "warmup_epochs": 0,
        "updates_per_epoch": 5,
        "batch_size": 16,
        "validation_every": 1,
    },
    "finetune": {
        "lr_init": 1e-3,
        "epochs": 2,
        "warmup_epochs": 0,
        "updates_per_epoch": 5,
        "batch_size": 16,
        "validation_every": 1,
    },
}


def test_dependents():
    assert dependents("curate") == ["curate"]
    assert dependents("forcing-shift") == ["curate", "forcing-shift"]
    assert dependents("verify-events") == [
        "curate",
        "scaler",
        "pretrain",
        "finetune",
        "predict",
        "thresholds",
        "verify-events",
    ]
    assert dependents("benchmark")[-2:] == ["evaluate", "benchmark"]
    with pytest.raises(ValidationError):
        dependents("deploy")


def test_every_stage_has_a_runner():
    for stage in STAGES:
        assert callable(getattr(Pipeline, "_" + stage.replace("-", "_")))
        assert set(pipeline.UPSTREAM[stage]) <= set(STAGES[: STAGES.index(stage)])


def test_skill_table_and_reports(tmp_path):
    obs = DailySeries("2021-01-01", [1.0, 2.0, 3.0, 4.0, np.nan])
    records = {"A": StationRecord("A", 10.0, obs)}
    predictions = {"A": {1: obs, 2: DailySeries("2021-01-01", [2.0, 3.0, 4.0, 5.0, 6.0]), 3: obs}}
    table = skill_table(predictions, records, Period.parse(("2021-01-01", "2021-01-05")), max_lead=lambda s: 2)
    assert table["lead_time"].tolist() == [1, 2]
    assert table["nse"][0] == 1.0
    assert table["n"].tolist() == [4, 4]

    write_skill_reports(tmp_path, "demo", table)
    skill = pd.read_csv(tmp_path / "skill_demo.csv")
    assert list(skill.columns[:2]) == ["station_id", "lead_time"]
    summary = json.loads((tmp_path / "summary_demo.json").read_text())
    assert summary["1"]["nse"]["median"] == 1.0
    ecdf = pd.read_csv(tmp_path / "ecdf_demo.csv")
    assert sorted(set(ecdf["metric"])) == ["kge_prime", "nse"]

    with pytest.raises(ValidationError):
        skill_table({"B": {1: obs}}, records, Period.parse(("2021-01-01", "2021-01-05")))


@pytest.fixture
def small_dataset(tmp_path):
    return write_synthetic_dataset(tmp_path / "data", n_basins=2, n_days=400, seed=1, sections=SMALL_SECTIONS)


def test_cli_requires_manifest(tmp_path):
    assert main(["run", "--out-dir", str(tmp_path), "-q"]) == 2
    assert main(["curate", "--manifest", str(tmp_path / "missing.json"), "-q"]) == 2


def test_cli_synth(tmp_path):
    assert main(["synth", str(tmp_path / "d"), "--n-basins", "1", "--n-days", "400", "-q"]) == 0
    manifest = RunManifest.load(tmp_path / "d" / "manifest.json")
    assert manifest.station_ids == ["FLAT", "S0000", "S0000B"]


def test_invalid_stage_option_exits_with_2(tmp_path, small_dataset):
    config = tmp_path / "run.toml"
    config.write_text("[curation]\nbogus = 1\n")
    argv = ["curate", "--manifest", str(small_dataset), "--config", str(config), "--out-dir", str(tmp_path / "run")]
    assert main(argv + ["-q"]) == 2
    assert not (tmp_path / "run" / "curate" / pipeline.STAGE_RECORD).exists()


def test_stage_failure_exits_with_3(tmp_path, monkeypatch, small_dataset):
    def broken(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "curate", broken)
    assert main(["curate", "--manifest", str(small_dataset), "--out-dir", str(tmp_path / "run"), "-q"]) == 3
    with pytest.raises(StageError) as info:
        Pipeline(RunManifest.load(small_dataset), tmp_path / "run").run(["curate"])
    assert info.value.stage == "curate"
    assert isinstance(info.value.__cause__, RuntimeError)


def test_unwritable_output_exits_with_3(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    assert main(["synth", str(blocker / "d"), "--n-basins", "1", "--n-days", "400", "-q"]) == 3

    a = tmp_path / "a.csv"
    a.write_text("station_id,kge_prime\nS1,0.5\n")
    assert main(["benchmark", "--a", str(a), "--b", str(a), "--out-dir", str(blocker / "out"), "-q"]) == 3


def test_cli_benchmark_files(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("station_id,lead_time,kge_prime\nS1,1,0.5\nS2,1,0.1\n")
    b.write_text("station_id,lead_time,kge_prime\nS1,1,0.4\nS2,1,0.3\n")
    out = tmp_path / "out"
    assert main(["benchmark", "--a", str(a), "--b", str(b), "--out-dir", str(out), "-q"]) == 0
    summary = json.loads((out / "benchmark_summary.json").read_text())
    assert summary["wins"]["counts"]["a"] == 1 and summary["wins"]["counts"]["b"] == 1
    assert main(["benchmark", "--a", str(a), "-q"]) == 2


def test_cli_evaluate_external_predictions(tmp_path, small_dataset):
    manifest = RunManifest.load(small_dataset)
    data = load_dataset(manifest, forcings=False)
    test = manifest.periods["test"]
    predictions = tmp_path / "preds"
    predictions.mkdir()
    obs = data.records["S0001"].discharge.slice(test.start, test.end)
    write_predictions_csv(predictions / "S0001.csv", {1: DailySeries(obs.start_date, np.nan_to_num(obs.values))})

    out = tmp_path / "out"
    argv = ["evaluate", "--manifest", str(small_dataset), "--predictions", str(predictions), "--out-dir", str(out)]
    assert main(argv + ["--name", "copy", "-q"]) == 0
    skill = pd.read_csv(out / "skill_copy.csv", dtype={"station_id": str})
    assert skill["station_id"].tolist() == ["S0001"]
    assert skill["nse"][0] == pytest.approx(1.0)


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    manifest_path = write_synthetic_dataset(root / "data", n_basins=3, seed=7, sections=SMALL_SECTIONS)
    out = root / "run"
    assert main(["run", "--manifest", str(manifest_path), "--out-dir", str(out), "-q"]) == 0
    return manifest_path, out


@pytest.mark.slow
def test_full_run_outputs(synthetic_run):
    _, out = synthetic_run
    for stage in STAGES:
        assert (out / stage / pipeline.STAGE_RECORD).exists()

    retained = (out / "curate" / "retained.txt").read_text().split()
    assert "FLAT" not in retained
    assert not {"S0000", "S0000B"} <= set(retained)
    removals = pd.read_csv(out / "curate" / "removals.csv", dtype=str)
    assert "FLAT" in set(removals["station_id"])

    for name in ("pretrained", "finetuned", "simulation"):
        assert sorted(p.stem for p in (out / "predict" / name).glob("*.csv")) == sorted(retained)

    skill = pd.read_csv(out / "evaluate" / "skill_finetuned.csv", dtype={"station_id": str})
    assert sorted(skill["lead_time"].unique()) == [1, 2, 3, 4, 5]
    assert set(skill["station_id"]) == set(retained)

    w1 = pd.read_csv(out / "forcing-shift" / "w1.csv")
    assert (w1["w1_normalized"] > 0).all()

    thresholds = json.loads((out / "thresholds" / "thresholds_obs.json").read_text())
    assert sorted(thresholds) == sorted(retained)
    tallies = pd.read_csv(out / "verify-events" / "global_tallies.csv")
    assert tallies["return_period"].tolist() == [1.5, 2.0, 5.0, 10.0, 20.0, 50.0]

    summary = json.loads((out / "benchmark" / "summary.json").read_text())
    assert summary["n_stations"] == len(retained)
    assert "kge_prime" in json.loads((out / "benchmark" / "finetune_impact.json").read_text())


@pytest.mark.slow
def test_repeated_runs_are_identical(tmp_path):
    manifest_path = write_synthetic_dataset(tmp_path / "data", n_basins=2, seed=11, sections=SMALL_SECTIONS)
    runs = [tmp_path / "first", tmp_path / "second"]
    for out in runs:
        assert main(["run", "--manifest", str(manifest_path), "--out-dir", str(out), "-q"]) == 0

    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    assert any(f.suffix == ".csv" for f in files) and any(f.suffix == ".pt" for f in files)
    for name in files:
        a, b = runs[0] / name, runs[1] / name
        if name.name == pipeline.STAGE_RECORD:
            assert json.loads(a.read_text())["key"] == json.loads(b.read_text())["key"]
        elif name.suffix == ".pt":
            first, second = (torch.load(p, map_location="cpu", weights_only=True) for p in (a, b))
            for key, tensor in first["model_state"].items():
                assert torch.equal(tensor, second["model_state"][key]), f"{name}: {key}"
            assert first["history"] == second["history"]
        else:
            assert a.read_bytes() == b.read_bytes(), str(name)


@pytest.mark.slow
def test_cache_reuse_and_invalidation(synthetic_run):
    manifest_path, out = synthetic_run
    manifest = RunManifest.load(manifest_path)

    again = Pipeline(manifest, out)
    again.run()
    assert again.executed == []

    per_lead = Pipeline(manifest.with_overrides(run_config={"options": {"aggregate_lead_times": False}}), out)
    per_lead.run(["verify-events"])
    assert per_lead.executed == ["verify-events"]
    assert "lead_time" in pd.read_csv(out / "verify-events" / "global_tallies.csv").columns

    entry = manifest.station("S0001")
    forecasts = read_forecast_csv(entry.forecast)
    first = forecasts[1]
    forecasts[1] = ForcingSeries.from_matrix(first.source, 1, first.start_date, first.matrix() * [1, 1, 1, 1, 1.01])
    write_forecast_csv(entry.forecast, forecasts)

    changed = Pipeline(manifest, out)
    changed.run()
    assert changed.executed == [
        "finetune",
        "predict",
        "evaluate",
        "forcing-shift",
        "thresholds",
        "verify-events",
        "benchmark",
    ]
    assert changed.keys["pretrain"] == again.keys["pretrain"]
