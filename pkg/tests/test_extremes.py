import datetime

import numpy as np
import pytest
from scipy import stats

from floodcast.errors import ValidationError
from floodcast.extremes import (
    RETURN_PERIODS,
    EventTally,
    ExtremesConfig,
    GumbelThresholds,
    ThresholdSource,
    aggregate_tallies,
    annual_maxima,
    dual_threshold_verify,
    extract_exceedances,
    fit_all_thresholds,
    fit_thresholds,
    gumbel_fit,
    load_thresholds,
    match_events,
    return_level,
    sample_l_moments,
    save_thresholds,
    tally_table,
)
from floodcast.hydrodata import DailySeries

START = datetime.date(1990, 1, 1)


def yearly_spikes(maxima, start_year=1990):
    """Daily series that is zero except for one peak per calendar year"""
    first = datetime.date(start_year, 1, 1)
    end = datetime.date(start_year + len(maxima), 1, 1)
    values = np.zeros((end - first).days)
    for i, peak in enumerate(maxima):
        values[(datetime.date(start_year + i, 6, 1) - first).days] = peak
    return DailySeries(first, values)


def test_gumbel_recovery():
    sample = stats.gumbel_r.rvs(loc=3.0, scale=2.0, size=10_000, random_state=0)
    xi, alpha = gumbel_fit(*sample_l_moments(sample))
    assert xi == pytest.approx(3.0, rel=0.05)
    assert alpha == pytest.approx(2.0, rel=0.05)


def test_sample_l_moments_small_sample():
    # lambda2 = E|X1 - X2| / 2 over all pairs
    l1, l2 = sample_l_moments([3.0, 1.0, 2.0])
    assert l1 == pytest.approx(2.0)
    assert l2 == pytest.approx((1 + 2 + 1) / 3 / 2)
    with pytest.raises(ValidationError):
        sample_l_moments([1.0])


@pytest.mark.parametrize("period, expected", [(2.0, 0.3665), (50.0, 3.902)])
def test_standard_gumbel_return_level(period, expected):
    assert return_level(0.0, 1.0, period) == pytest.approx(expected, abs=1e-4)


def test_return_levels_increase():
    levels = [return_level(1.2, 0.7, t) for t in RETURN_PERIODS]
    assert all(b > a for a, b in zip(levels, levels[1:]))


@pytest.mark.parametrize("period", [1.0, 0.5, -2.0])
def test_return_period_must_exceed_one_year(period):
    with pytest.raises(ValidationError):
        return_level(0.0, 1.0, period)


def test_degenerate_fit():
    with pytest.raises(ValidationError):
        gumbel_fit(1.0, 0.0)


def test_annual_maxima_skips_incomplete_years():
    values = np.arange(3 * 365 + 1, dtype=float)
    series = DailySeries("2001-01-01", values)
    assert [y for y, _ in annual_maxima(series)] == [2001, 2002, 2003]

    gappy = values.copy()
    gappy[400:600] = np.nan
    maxima = annual_maxima(DailySeries("2001-01-01", gappy))
    assert [y for y, _ in maxima] == [2001, 2003]
    assert maxima[0][1] == 364.0


def test_fit_thresholds_from_annual_peaks():
    peaks = stats.gumbel_r.rvs(loc=20.0, scale=5.0, size=30, random_state=1)
    thresholds = fit_thresholds(yearly_spikes(peaks), ThresholdSource.OBSERVED)
    xi, alpha = gumbel_fit(*sample_l_moments(peaks))
    assert thresholds.n_annual_maxima == 30
    assert thresholds.xi == pytest.approx(xi)
    assert thresholds.alpha == pytest.approx(alpha)
    assert thresholds.level(10) == pytest.approx(return_level(xi, alpha, 10))
    assert list(thresholds.levels) == list(RETURN_PERIODS)


def test_fit_thresholds_undefined():
    assert fit_thresholds(yearly_spikes([5.0, 6.0, 7.0]), "simulated") is None
    assert fit_thresholds(yearly_spikes([4.0] * 12), "simulated") is None


def test_fit_all_thresholds_threads():
    series = {f"S{i}": yearly_spikes(np.arange(12.0) + i) for i in range(4)}
    serial = fit_all_thresholds(series, "observed")
    pooled = fit_all_thresholds(series, "observed", threads=3)
    assert list(serial) == ["S0", "S1", "S2", "S3"]
    assert serial == pooled


def test_thresholds_file(tmp_path):
    fitted = {
        "A": GumbelThresholds.from_parameters(10.0, 2.0, "simulated", 15, (2.0, 5.0)),
        "B": None,
    }
    path = save_thresholds(tmp_path / "t.json", fitted)
    assert load_thresholds(path) == fitted
    with pytest.raises(ValidationError):
        fitted["A"].level(20)


def test_threshold_levels_must_increase():
    with pytest.raises(ValidationError):
        GumbelThresholds(0.0, 1.0, {2.0: 5.0, 5.0: 4.0}, "observed", 10)
    with pytest.raises(ValueError):
        GumbelThresholds(0.0, 1.0, {2.0: 5.0}, "forecast", 10)


@pytest.mark.parametrize(
    "options",
    [{"return_periods": (1.0,)}, {"return_periods": (100.0,)}, {"margin_days": -1}, {"min_annual_maxima": 1}],
)
def test_config_validation(options):
    with pytest.raises(ValidationError):
        ExtremesConfig(**options)


def test_config_from_dict():
    config = ExtremesConfig.from_dict({"return_periods": [5, 2, 2], "margin_days": 1})
    assert config.return_periods == (2.0, 5.0)
    with pytest.raises(ValidationError, match="margin"):
        ExtremesConfig.from_dict({"margin": 1})


def test_exceedances_are_strict():
    series = DailySeries("2020-01-01", [1.0, 2.0, np.nan, 3.0])
    assert extract_exceedances(series, 2.0) == {datetime.date(2020, 1, 4)}
    with pytest.raises(ValidationError):
        extract_exceedances(series, np.nan)


def random_days(rng, n):
    offsets = rng.choice(365, size=n, replace=False)
    return {START + datetime.timedelta(days=int(k)) for k in offsets}


def test_match_without_margin_is_set_arithmetic():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        forecast = random_days(rng, rng.integers(0, 30))
        observed = random_days(rng, rng.integers(0, 30))
        tally = match_events(forecast, observed)
        assert tally.hits == len(forecast & observed)
        assert tally.false_alarms == len(forecast - observed)
        assert tally.misses == len(observed - forecast)


def test_hits_grow_with_margin():
    rng = np.random.default_rng(3)
    for _ in range(200):
        forecast = random_days(rng, rng.integers(1, 40))
        observed = random_days(rng, rng.integers(1, 40))
        hits = [match_events(forecast, observed, margin).hits for margin in range(5)]
        assert all(b >= a for a, b in zip(hits, hits[1:]))
        assert hits[-1] <= min(len(forecast), len(observed))


def test_margin_matches_one_to_one():
    day = START
    forecast = [day, day + datetime.timedelta(days=1)]
    observed = [day + datetime.timedelta(days=1)]
    tally = match_events(forecast, observed, margin=1)
    assert (tally.hits, tally.misses, tally.false_alarms) == (1, 0, 1)
    with pytest.raises(ValidationError):
        match_events(forecast, observed, margin=-1)


def test_tally_scores():
    tally = EventTally(2.0, hits=1757086, misses=100, false_alarms=1513494)
    assert tally.precision == pytest.approx(0.537, abs=5e-4)
    empty = EventTally(2.0)
    assert empty.precision is None and empty.recall is None
    assert EventTally(2.0, hits=0, misses=3).recall == 0.0
    with pytest.raises(ValidationError):
        EventTally(2.0, hits=-1)
    with pytest.raises(ValidationError):
        EventTally(2.0) + EventTally(5.0)


def verification_fixture():
    th_sim = GumbelThresholds(0.0, 1.0, {2.0: 5.0, 5.0: 8.0}, ThresholdSource.SIMULATED, 20)
    th_obs = GumbelThresholds(0.0, 1.0, {2.0: 10.0, 5.0: 20.0}, ThresholdSource.OBSERVED, 20)
    forecast = DailySeries("2020-01-01", [0.0, 6.0, 9.0, 0.0, 6.0])
    obs = DailySeries("2020-01-01", [0.0, 0.0, 25.0, 11.0, np.nan])
    return forecast, obs, th_sim, th_obs


def test_dual_threshold_verify():
    forecast, obs, th_sim, th_obs = verification_fixture()
    tallies = dual_threshold_verify(forecast, obs, th_sim, th_obs, return_periods=(2.0, 5.0))
    # the last forecast exceedance has no observation and is ignored
    assert tallies[2.0].to_dict() == {
        "return_period": 2.0,
        "hits": 1,
        "misses": 1,
        "false_alarms": 1,
        "precision": 0.5,
        "recall": 0.5,
    }
    assert (tallies[5.0].hits, tallies[5.0].misses, tallies[5.0].false_alarms) == (1, 0, 0)

    widened = dual_threshold_verify(forecast, obs, th_sim, th_obs, margin=1, return_periods=(2.0,))
    assert widened[2.0].hits == 2


def test_dual_threshold_verify_checks_sources():
    forecast, obs, th_sim, th_obs = verification_fixture()
    with pytest.raises(ValidationError):
        dual_threshold_verify(forecast, obs, th_obs, th_obs, return_periods=(2.0,))
    with pytest.raises(ValidationError):
        dual_threshold_verify(forecast, obs, th_sim, th_sim, return_periods=(2.0,))


def test_dual_threshold_verify_disjoint_periods():
    forecast, obs, th_sim, th_obs = verification_fixture()
    later = DailySeries("2021-01-01", obs.values)
    tallies = dual_threshold_verify(forecast, later, th_sim, th_obs, return_periods=(2.0, 5.0))
    assert all(t == EventTally(t.return_period) for t in tallies.values())


def test_aggregate_and_table():
    forecast, obs, th_sim, th_obs = verification_fixture()
    per_basin = dual_threshold_verify(forecast, obs, th_sim, th_obs, return_periods=(2.0, 5.0))
    total = aggregate_tallies([per_basin, per_basin])
    assert total[2.0].hits == 2 and total[2.0].false_alarms == 2
    table = tally_table(total)
    assert list(table.columns) == ["return_period", "hits", "misses", "false_alarms", "precision", "recall"]
    assert table["return_period"].tolist() == [2.0, 5.0]
    assert table["precision"].tolist() == [0.5, 1.0]
