import math

import numpy as np
import pytest
from scipy.stats import norm

from levyhw.ergodicity_lab import (Binning, FitError, ModelConfig, PreconditionError, TailStatistic, TvCurve,
                                   empirical_tv, estimator_floor, fit_exponential_rate, fit_polynomial_rate,
                                   hill_tail_index, stationary_identity_check, stationary_sample)
from levyhw.levy_sources import CPMeasureSpec, RadialLaw, RngStream
from levyhw.sde_model import ControlPolicy, DriftParams, Driver, effective_params


def _bm_config(gamma=(0.0, 0.0), x0=None):
    p = DriftParams.recentred(1.0, [1.0, 2.0], list(gamma))
    cp = CPMeasureSpec(0.0, np.array([1.0, 0.0]), RadialLaw("point", r=1.0))
    return ModelConfig(p, ControlPolicy.constant([0.5, 0.5]), Driver.brownian_cp([1.0, 1.0], cp), dt=0.05, x0=x0)


def test_tv_trivial_cases():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5000, 2))
    assert empirical_tv(a, a)[0] == 0.0
    far = a + 200.0  # lands entirely in the overflow cells
    assert empirical_tv(a, far)[0] == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        empirical_tv(np.empty((0, 2)), a)
    with pytest.raises(ValueError):
        empirical_tv(a, rng.normal(size=(10, 3)))


def test_tv_gaussian_closed_form():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=10**6), rng.normal(1.0, 1.0, size=10**6)
    tv, err = empirical_tv(a, b, Binning(widths=(0.02,)))
    assert tv == pytest.approx(2 * norm.cdf(0.5) - 1, abs=0.01)
    assert err < 0.01


def test_tv_pseudometric():
    rng = np.random.default_rng(2)
    bins = Binning(widths=(0.25, 0.25))
    for _ in range(5):
        s = [rng.normal(rng.uniform(-1, 1, 2), 1.0, size=(4000, 2)) for _ in range(3)]
        ab = empirical_tv(s[0], s[1], bins)[0]
        assert ab == empirical_tv(s[1], s[0], bins)[0]
        # with a fixed grid the histogram TV is an exact pseudometric
        assert ab <= empirical_tv(s[0], s[2], bins)[0] + empirical_tv(s[2], s[1], bins)[0] + 1e-12


def test_estimator_floor_shrinks_with_n():
    x = np.random.default_rng(3).normal(size=(80000, 2))
    coarse = Binning(widths=(0.5, 0.5))
    floors = [estimator_floor(x[:n], binning=coarse) for n in (2000, 8000, 80000)]
    assert floors[0] > floors[1] > floors[2] > 0
    assert floors[2] < 0.04
    shifted = empirical_tv(x[:40000], x[40000:] + 1.0, coarse)[0]
    assert shifted > 10 * floors[2]


def test_tv_curve_rejects_out_of_range():
    with pytest.raises(ValueError):
        TvCurve([1, 2], [0.5, 1.2], None)


def _curve(t, tv, floor=0.0):
    return TvCurve(np.asarray(t, float), np.asarray(tv, float), None, floor)


def test_polynomial_fit_oracles():
    t = np.array([1, 2, 4, 8, 16, 32], float)
    fit = fit_polynomial_rate(_curve(t, 0.8 * t**-0.5))
    assert abs(fit.exponent + 0.5) < 1e-12
    assert fit_polynomial_rate(_curve(t, np.full(t.size, 0.3))).exponent == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(4)
    t = np.geomspace(1, 100, 10)
    noisy = 0.8 * t**-0.5 * (1 + 0.05 * rng.standard_normal(t.size))
    assert fit_polynomial_rate(_curve(t, noisy)).exponent == pytest.approx(-0.5, abs=0.05)


def test_polynomial_fit_censors_floor():
    t = np.array([1, 2, 4, 8, 16, 32], float)
    tv = np.array([0.5, 0.35, 0.25, 0.055, 0.05, 0.049])
    fit = fit_polynomial_rate(_curve(t, tv, floor=0.03))
    assert fit.excluded_times == [8.0, 16.0, 32.0]
    assert "fewer than 4 points above the floor" in fit.flags
    with pytest.raises(FitError):
        fit_polynomial_rate(_curve(t, np.full(6, 0.04), floor=0.03))


def test_exponential_fit_oracles():
    t = np.linspace(0, 10, 11)
    fit = fit_exponential_rate(_curve(t, 0.9 * np.exp(-0.3 * t)))
    assert fit.rate == pytest.approx(0.3, abs=1e-12)
    assert not fit.flags
    t = np.geomspace(0.01, 100, 12)
    assert fit_exponential_rate(_curve(t, np.minimum(1.0, t**-0.5))).flags
    tv = 0.9 * np.exp(-0.3 * np.linspace(0, 10, 11))
    tv[-3:] = 0.05
    cens = fit_exponential_rate(_curve(np.linspace(0, 10, 11), tv, floor=0.04))
    assert cens.excluded_times == [8.0, 9.0, 10.0]
    assert cens.rate == pytest.approx(0.3, abs=1e-12)


def test_hill_pareto_oracle():
    x = (1.0 - np.random.default_rng(5).random(10**6)) ** (-1 / 1.5)
    res = hill_tail_index(x, k=10**4, n_boot=20)
    assert res.index == pytest.approx(1.5, abs=0.05)
    assert res.ci[0] < res.index < res.ci[1]
    assert res.stable


def test_hill_flags_light_tail_and_rejects_degenerate():
    e = np.random.default_rng(6).exponential(size=10**5)
    res = hill_tail_index(e, n_boot=0)
    assert not res.stable and res.flags
    vals = [res.sweep[k] for k in sorted(res.sweep)]
    assert vals[0] > vals[-1]  # small k sees the high tail, where the index grows
    with pytest.raises(FitError):
        hill_tail_index(np.ones(1000), k=50, n_boot=0)
    with pytest.raises(FitError):
        hill_tail_index(np.ones(5))
    with pytest.raises(ValueError):
        hill_tail_index(np.arange(100.0), k=60)


def test_tail_statistic_counts_zeros():
    proj = np.concatenate([-np.ones(900), np.linspace(1, 10, 100)])
    st = TailStatistic(proj, 1.0 + np.abs(proj))
    assert st.positive_part.size == 100
    with pytest.raises(FitError):
        st.hill()  # k = 1000^(2/3) = 99 needs more than 198 positive values
    states = np.random.default_rng(7).normal(size=(50, 2))
    ts = TailStatistic.from_states(states, [1.0, 2.0])
    assert np.allclose(ts.projection, states @ [1.0, 0.5])
    assert np.all(np.isfinite(ts.smooth))


def test_stationary_sample_noise_free_is_fixed_point():
    cfg = ModelConfig(DriftParams.recentred(1.0, [1.0, 2.0], [0.0, 0.0]), ControlPolicy.constant([0.5, 0.5]),
                      Driver.none(2), dt=0.01, x0=[-3.0, 2.0])
    snap = stationary_sample(cfg, 30.0, 100, 1.0, RngStream(0))
    assert np.allclose(snap.pooled(), [-0.5, -0.5], atol=1e-6)


def test_stationary_sample_self_consistency():
    cfg = _bm_config(gamma=(0.5, 0.5))
    a = stationary_sample(cfg, 30.0, 20000, 5.0, RngStream(1)).pooled()
    b = stationary_sample(cfg, 30.0, 20000, 5.0, RngStream(2)).pooled()
    assert empirical_tv(a, b, Binning(widths=(0.5, 0.5)))[0] <= 0.05
    far = stationary_sample(_bm_config(x0=[40.0, 40.0]), 0.0, 4000, 5.0, RngStream(3))
    assert not far.diagnostics["stationary_ok"]
    assert any("not be stationary" in w for w in far.diagnostics["warnings"])


def test_identity_check_preconditions():
    sample = np.random.default_rng(8).normal(size=(1000, 2))
    base = DriftParams.recentred(1.0, [1.0, 2.0], [0.0, 0.0])
    cp = CPMeasureSpec(0.0, np.array([1.0, 0.0]), RadialLaw("point", r=1.0))
    pol = ControlPolicy.constant([0.5, 0.5])
    with_gamma = DriftParams.recentred(1.0, [1.0, 2.0], [0.5, 0.0])
    with pytest.raises(PreconditionError, match="Gamma"):
        stationary_identity_check(sample, effective_params(with_gamma, cp), with_gamma, pol)
    neg = DriftParams([0.5, 0.5], [1.0, 2.0], [0.0, 0.0])
    with pytest.raises(PreconditionError, match="no invariant measure expected"):
        stationary_identity_check(sample, effective_params(neg, cp), neg, pol)
    heavy = CPMeasureSpec(1.0, np.array([1.0, 0.0]), RadialLaw("pareto", theta=0.9, scale=1.0))
    with pytest.raises(PreconditionError):
        stationary_identity_check(sample, effective_params(base, heavy), base, pol)


def test_identity_check_recovers_beta():
    cfg = _bm_config()
    snap = stationary_sample(cfg, 100.0, 40000, 10.0, RngStream(4), per_replication=4)
    rep = stationary_identity_check(snap, effective_params(cfg.params, cfg.driver.cp), cfg.params, cfg.policy)
    assert rep.sample_mean == pytest.approx(1.0, abs=0.05)
    assert rep.to_dict()["n"] == 40000
