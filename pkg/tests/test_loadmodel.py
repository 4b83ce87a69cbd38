import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pase.loadmodel import (
    DAY,
    ForecastSet,
    HouseholdTrace,
    LoadEvolutionModel,
    ProfileParams,
    TracePool,
    aggregate_profile,
    error_autocorrelation,
    fit_evolution_model,
    forecast_from_profile,
    house_count,
    load_fitted_model,
    read_traces_csv,
    save_fitted_model,
    synth_traces,
    write_traces_csv,
)
from pase.network import load_network

from conftest import write_feeder


# ---------------------------------------------------------------- house_count

def test_house_count_reference_bus(net):
    n = house_count(net, n_ref=10, ref_bus=10)
    assert n[10 - 1] == 10
    assert n.shape == (32,) and n.min() >= 1


def test_house_count_proportional(tmp_path):
    # reference bus 1 at 100 kW; bus 2 doubles it; bus 3 is 0.24 of it
    rows = [(0, 1, 0.1, 0.1, 100, 50), (1, 2, 0.1, 0.1, 200, 50), (2, 3, 0.1, 0.1, 24, 10)]
    net = load_network(write_feeder(tmp_path / "f.csv", rows))
    n = house_count(net, n_ref=10, ref_bus=1)
    assert list(n) == [10, 20, 2]


def test_house_count_zero_reference(tmp_path):
    rows = [(0, 1, 0.1, 0.1, 0, 0), (1, 2, 0.1, 0.1, 200, 50)]
    net = load_network(write_feeder(tmp_path / "f.csv", rows))
    with pytest.raises(ValueError):
        house_count(net, n_ref=10, ref_bus=1)


# ---------------------------------------------------------------- synth_traces

def test_synth_traces_empty():
    assert synth_traces(0) == []


def test_synth_traces_deterministic():
    a = synth_traces(3, seed=7)
    b = synth_traces(3, seed=7)
    c = synth_traces(3, seed=8)
    for x, y in zip(a, b):
        assert np.array_equal(x.samples, y.samples)
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_synth_traces_shape_and_sign():
    tr = synth_traces(5, resolution=6.0, seed=1)
    for t in tr:
        assert isinstance(t, HouseholdTrace)
        assert t.samples.shape == (int(DAY / 6),)
        assert t.duration == DAY
        assert np.all(t.samples >= 0)


def test_synth_traces_rejects_short_duration():
    with pytest.raises(ValueError):
        synth_traces(1, duration=3600.0)
    with pytest.raises(ValueError):
        synth_traces(-1)


def test_synth_scale_shrinks_with_time_step():
    pool = TracePool(seed=3)
    X = pool.samples(range(1000))
    rng = np.random.default_rng(0)
    profiles = [aggregate_profile(X, 10, 1.0, rng) for _ in range(20)]
    b6 = fit_evolution_model(profiles, 6.0).b
    b300 = fit_evolution_model(profiles, 300.0).b
    assert b6 < b300


def test_profile_params_accept_lists():
    # JSON configs deliver lists; the parameters must stay hashable
    p = ProfileParams(**json.loads('{"base_w": [50, 150]}'))
    assert p.base_w == (50, 150)
    hash(p)


def test_trace_pool_disjoint_halves():
    pool = TracePool(seed=0, size=10)
    assert set(pool.training()).isdisjoint(pool.testing())
    assert np.array_equal(pool.trace(12).samples, pool.trace(12).samples)


def test_cross_bus_change_independence():
    """Load changes of bus-sized aggregates of disjoint houses are uncorrelated
    for lags up to 30 min."""
    pool = TracePool(seed=0)
    X = pool.samples(range(2000, 2400))
    rng = np.random.default_rng(1)
    n = 20  # typical houses per bus on the default feeder
    for lag in (1, 100, 300):
        cs = []
        for _ in range(20):
            idx = rng.permutation(len(X))
            a = X[idx[:n]].sum(0)
            b = X[idx[n:2 * n]].sum(0)
            cs.append(np.corrcoef(a[lag:] - a[:-lag], b[lag:] - b[:-lag])[0, 1])
        assert abs(np.mean(cs)) < 0.05, (lag, np.mean(cs))


# ---------------------------------------------------------------- aggregate_profile

def test_aggregate_single_trace_unchanged():
    t = np.array([1.0, 2.0, 3.0, 6.0])
    out = aggregate_profile([t], 1, t.mean(), rng=0)
    np.testing.assert_allclose(out, t, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.floats(1.0, 1e6), st.integers(0, 2**32 - 1))
def test_aggregate_mean_matches_target(n, target, seed):
    rows = np.random.default_rng(seed).uniform(0.1, 5.0, (6, 50))
    out = aggregate_profile(rows, n, target, rng=seed)
    assert abs(out.mean() - target) <= 1e-9 * target


def test_aggregate_smooths_relative_fluctuation():
    pool = TracePool(seed=0)
    X = pool.samples(range(2000, 2050))
    out = aggregate_profile(X, 10, 100e3, rng=4)
    assert abs(out.mean() - 100e3) < 1e-9 * 100e3
    member_cv = X.std(axis=1) / X.mean(axis=1)
    assert out.std() / out.mean() < member_cv.min()
    assert forecast_from_profile(out) == pytest.approx(100e3, rel=1e-12)


def test_aggregate_insufficient_traces():
    with pytest.raises(ValueError):
        aggregate_profile(np.ones((2, 10)), 3, 1.0)


# ---------------------------------------------------------------- fitting

def test_fit_constant_profile():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fit = fit_evolution_model(np.full(100, 5.0), 6.0)
    assert fit.b == 0.0 and fit.degenerate
    assert w


def test_fit_alternating():
    prof = np.cumsum(np.tile([1e3, -1e3], 50))
    assert fit_evolution_model(prof, 6.0).b == pytest.approx(1e3)


def test_fit_recovers_laplace_scale():
    rng = np.random.default_rng(2024)
    prof = np.cumsum(rng.laplace(0.0, 2e3, 100_000))
    b = fit_evolution_model(prof, 6.0).b
    assert 1.94e3 <= b <= 2.06e3


def test_fit_time_step_must_match_resolution():
    with pytest.raises(ValueError):
        fit_evolution_model(np.arange(100.0), 7.0)
    with pytest.raises(ValueError):
        fit_evolution_model(np.arange(3.0), 12.0)


def test_laplace_variance_identity():
    m = LoadEvolutionModel([1.0, 2.5], [0.5, 0.0])
    np.testing.assert_array_equal(m.var_p, 2 * m.b_p**2)
    np.testing.assert_array_equal(m.var_q, 2 * m.b_q**2)
    assert fit_evolution_model([1.0, -1.0, 2.0], 6.0).variance == 2 * 2.5**2


def test_evolution_model_sampling_variance(rng):
    m = LoadEvolutionModel([100.0, 10.0], [0.0, 50.0])
    S = m.sample(rng, 10_000)
    assert S.shape == (4, 10_000)
    np.testing.assert_allclose(S.var(axis=1)[[0, 1, 3]], m.covariance_diag[[0, 1, 3]], rtol=0.1)
    assert np.all(S[2] == 0)


def test_forecast_examples():
    assert forecast_from_profile(np.full(10, 5e3)) == 5e3
    t = np.arange(1000) / 1000 * 2 * np.pi * 3
    assert forecast_from_profile(10e3 + 2e3 * np.sin(t)) == pytest.approx(10e3, rel=1e-12)
    with pytest.raises(ValueError):
        forecast_from_profile([])


def test_autocorrelation_white_noise(rng):
    assert abs(error_autocorrelation(rng.standard_normal(100_000), 6.0)) < 0.02


def test_autocorrelation_ar1(rng):
    g = rng.standard_normal(100_000)
    x = np.empty_like(g)
    x[0] = g[0]
    for k in range(1, len(g)):
        x[k] = 0.9 * x[k - 1] + g[k]
    assert 0.88 <= error_autocorrelation(x, 6.0) <= 0.92


def test_autocorrelation_lag_zero_and_degenerate(rng):
    assert error_autocorrelation(rng.standard_normal(50), 0.0) == 1.0
    with pytest.raises(ValueError):
        error_autocorrelation(np.ones(50), 6.0)


# ---------------------------------------------------------------- forecasts and IO

def test_forecast_set_identities():
    fc = ForecastSet([3.0, 0.0], [4.0, 1.0], sigma0=0.3, psi_p=0.5, psi_q=0.5)
    np.testing.assert_allclose(fc.s_f, [5.0, 1.0])
    np.testing.assert_allclose(fc.sigma_f, 0.3 * fc.s_f)
    np.testing.assert_allclose(fc.sigma_fp, [0.9, 0.0])
    with pytest.raises(ValueError):
        ForecastSet([1.0], [1.0], psi_p=1.5)
    with pytest.raises(ValueError):
        ForecastSet([1.0], [1.0], sigma0=-0.1)


def test_traces_csv_round_trip(tmp_path):
    tr = [HouseholdTrace(np.array([1.0, 2.5, 0.0]), 6.0), HouseholdTrace(np.array([3.0, 4.0, 5.0]), 6.0)]
    path = tmp_path / "t.csv"
    write_traces_csv(path, tr)
    back = read_traces_csv(path)
    assert len(back) == 2 and back[0].resolution == 6.0
    for a, b in zip(tr, back):
        np.testing.assert_array_equal(a.samples, b.samples)


def test_fitted_model_round_trip(tmp_path):
    m = LoadEvolutionModel([1.0, 2.0], [3.0, 4.0])
    fc = ForecastSet([10.0, 20.0], [5.0, 6.0], 0.3, [0.9, 0.8], [0.7, 0.6])
    path = tmp_path / "m.json"
    save_fitted_model(path, m, fc)
    m2, fc2 = load_fitted_model(path)
    np.testing.assert_array_equal(m2.b_p, m.b_p)
    np.testing.assert_array_equal(fc2.psi_q, fc.psi_q)
    assert set(json.loads(path.read_text())["buses"][0]) >= {"b_p", "b_q", "psi_p", "psi_q", "p_f", "q_f"}
