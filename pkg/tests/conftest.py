import pytest

from floodcast.hydrodata import fit_scaler
from floodcast.io import Dataset
from floodcast.layers import ModelConfig
from floodcast.synthetic import ATTRIBUTE_NAMES, SyntheticBasinSpec, generate_synthetic

N_DAYS = 400
TRAIN_PERIOD = ("2000-02-01", "2000-09-30")
TEST_PERIOD = ("2000-10-01", "2001-01-31")


def build_dataset(n_basins=3, n_days=N_DAYS, wet_bias=1.3, seed=0):
    records, reanalysis, forecasts = {}, {}, {}
    for i in range(n_basins):
        spec = SyntheticBasinSpec(station_id=f"B{i}", storage_coefficient=0.1 + 0.1 * i, wet_bias=wet_bias)
        basin = generate_synthetic(spec, n_days, seed=seed + i)
        records[spec.station_id] = basin.record
        reanalysis[spec.station_id] = basin.reanalysis
        forecasts[spec.station_id] = basin.forecasts
    return Dataset(records, ATTRIBUTE_NAMES, reanalysis, forecasts)


@pytest.fixture
def tiny_data():
    return build_dataset()


@pytest.fixture
def tiny_scaler(tiny_data):
    return fit_scaler(list(tiny_data.records.values()), tiny_data.reanalysis, TRAIN_PERIOD, ATTRIBUTE_NAMES)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        hidden_size=8,
        dropout_p=0.0,
        embed_layers=(6, 4),
        window=20,
        horizon=5,
        n_static=len(ATTRIBUTE_NAMES) + 1,
    )
