import json

import numpy as np
import pytest

from floodcast.curation import BasinGeometry
from floodcast.errors import ValidationError
from floodcast.hydrodata import FORCING_VARIABLES, DailySeries, ForcingSeries, ForcingSource
from floodcast.io import (
    load_dataset,
    read_attributes_csv,
    read_forecast_csv,
    read_geojson,
    read_reanalysis_csv,
    read_series_csv,
    write_attributes_csv,
    write_forecast_csv,
    write_geojson,
    write_reanalysis_csv,
    write_series_csv,
)
from floodcast.manifest import RunManifest


def test_series_csv_keeps_missing(tmp_path):
    series = DailySeries("2020-02-27", [1.5, np.nan, 0.0, 2.25])
    path = tmp_path / "s.csv"
    write_series_csv(path, series)
    assert path.read_text().splitlines()[2] == "2020-02-28,"
    assert read_series_csv(path) == series


def test_series_csv_na_literal_and_gaps(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("date,value\n2020-01-01,1.0\n2020-01-02,NA\n2020-01-04,4.0\n")
    series = read_series_csv(path)
    assert len(series) == 4
    assert series.n_valid == 2


@pytest.mark.parametrize(
    "content",
    ["date,flow\n2020-01-01,1\n", "date,value\n01/02/2020,1\n", "date,value\n2020-01-01,1\n2020-01-01,2\n"],
)
def test_series_csv_malformed(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(ValidationError):
        read_series_csv(path)


def test_forcing_csvs(tmp_path):
    rng = np.random.default_rng(3)
    matrix = np.abs(rng.normal(size=(6, 5)))
    matrix[2, 1] = np.nan
    reanalysis = ForcingSeries.from_matrix(ForcingSource.REANALYSIS, 0, "2021-03-01", matrix)
    write_reanalysis_csv(tmp_path / "r.csv", reanalysis)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "date," + ",".join(FORCING_VARIABLES)
    loaded = read_reanalysis_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(loaded.matrix(), reanalysis.matrix())

    forecasts = {
        lead: ForcingSeries.from_matrix(ForcingSource.FORECAST_CONTROL, lead, "2021-03-01", matrix + lead)
        for lead in (1, 2, 3)
    }
    write_forecast_csv(tmp_path / "f.csv", forecasts)
    loaded = read_forecast_csv(tmp_path / "f.csv")
    assert sorted(loaded) == [1, 2, 3]
    for lead in (1, 2, 3):
        assert loaded[lead].lead_time_days == lead
        np.testing.assert_array_equal(loaded[lead].matrix(), forecasts[lead].matrix())


def test_reanalysis_csv_missing_variable(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("date,SSR,STR,SP,T2M\n2020-01-01,1,2,3,4\n")
    with pytest.raises(ValidationError, match="TP"):
        read_reanalysis_csv(path)


def test_attributes_csv(tmp_path):
    names = ("area", "slope")
    attributes = {"B": np.array([2.0, np.nan]), "A": np.array([1.0, 0.5])}
    write_attributes_csv(tmp_path / "a.csv", names, attributes)
    read_names, read_attrs = read_attributes_csv(tmp_path / "a.csv")
    assert read_names == names
    np.testing.assert_array_equal(read_attrs["A"], [1.0, 0.5])
    assert np.isnan(read_attrs["B"][1])


def test_attributes_csv_keeps_leading_zeros(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("station_id,x\n00123,1.0\n")
    _, attrs = read_attributes_csv(path)
    assert "00123" in attrs


def test_geojson(tmp_path):
    geometries = {
        "A": BasinGeometry("A", (((0, 0), (2, 0), (2, 2), (0, 2)), ((0.5, 0.5), (1, 0.5), (1, 1), (0.5, 1)))),
        "B": BasinGeometry("B", (((3, 3), (4, 3), (4, 4)),)),
    }
    write_geojson(tmp_path / "b.geojson", geometries)
    loaded = read_geojson(tmp_path / "b.geojson")
    assert sorted(loaded) == ["A", "B"]
    assert loaded["A"].rings == geometries["A"].rings
    assert loaded["A"].polygon.area == pytest.approx(3.75)


def test_geojson_single_part_multipolygon(tmp_path):
    collection = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "properties": {"station_id": "M"},
                "geometry": {"type": "MultiPolygon", "coordinates": [[[[0, 0], [1, 0], [1, 1], [0, 0]]]]},
            }
        ],
    }
    path = tmp_path / "m.geojson"
    path.write_text(json.dumps(collection))
    assert read_geojson(path)["M"].polygon.area == pytest.approx(0.5)

    collection["features"][0]["geometry"]["coordinates"] *= 2
    path.write_text(json.dumps(collection))
    with pytest.raises(ValidationError, match="multi-part"):
        read_geojson(path)


def _manifest(tmp_path, units="m3/s"):
    write_series_csv(tmp_path / "q.csv", DailySeries("2020-01-01", [86.4, 172.8, np.nan]))
    matrix = np.ones((3, 5))
    write_reanalysis_csv(tmp_path / "r.csv", ForcingSeries.from_matrix(ForcingSource.REANALYSIS, 0, "2020-01-01", matrix))
    write_attributes_csv(tmp_path / "a.csv", ("x",), {"S1": np.array([4.0])})
    raw = {
        "discharge_units": units,
        "attributes": "a.csv",
        "stations": [{"station_id": "S1", "area_km2": 10.0, "discharge": "q.csv", "reanalysis": "r.csv"}],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    return RunManifest.load(tmp_path / "manifest.json")


@pytest.mark.parametrize("threads", [1, 2])
def test_load_dataset_converts_units(tmp_path, threads):
    data = load_dataset(_manifest(tmp_path), threads=threads)
    record = data.records["S1"]
    np.testing.assert_allclose(record.discharge.values[:2], [864.0, 1728.0])
    assert np.isnan(record.discharge.values[2])
    np.testing.assert_array_equal(record.static_attrs, [4.0])
    assert data.attribute_names == ("x",)
    assert data.forcing("S1").lead_time_days == 0
    with pytest.raises(ValidationError):
        data.forcing("S1", lead_time=1)


def test_load_dataset_specific_units(tmp_path):
    data = load_dataset(_manifest(tmp_path, units="mm/d"), forcings=False)
    np.testing.assert_allclose(data.records["S1"].discharge.values[:2], [86.4, 172.8])
    assert data.reanalysis == {}


def test_load_dataset_missing_attributes(tmp_path):
    manifest = _manifest(tmp_path)
    write_attributes_csv(tmp_path / "a.csv", ("x",), {"OTHER": np.array([4.0])})
    with pytest.raises(ValidationError, match="S1"):
        load_dataset(manifest)
