import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from levyhw.levy_sources import CPMeasureSpec, ParameterError, RadialLaw, RngStream, stable_scale_from_weight
from levyhw.sde_model import (ControlPolicy, DriftParams, Driver, PolicyError, SimulationOverflow, drift,
                              effective_params, euler_ensemble, evaluate_policy, simulate_path,
                              spare_capacity_and_recenter)

vec = lambda m: arrays(np.float64, m, elements=st.floats(-50, 50))


def simplex(m):
    return arrays(np.float64, m, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


def test_drift_examples():
    p = DriftParams([-0.5, -0.5], [1, 1], [0, 0])
    assert np.allclose(drift([-1, -1], [0.3, 0.7], p), [0.5, 0.5])
    r = DriftParams.recentred(1.0, [1, 1], [0, 0])
    assert np.allclose(drift([1, 1], [1, 0], r), [0.5, -1.5])


@settings(max_examples=100, deadline=None)
@given(vec(3), simplex(3), simplex(3))
def test_drift_affine_in_u(x, u1, u2):
    p = DriftParams([-0.2, 0.1, -0.4], [1.0, 2.0, 0.5], [0.3, 0.0, 1.0])
    mid = drift(x, 0.5 * u1 + 0.5 * u2, p)
    assert np.allclose(mid, 0.5 * drift(x, u1, p) + 0.5 * drift(x, u2, p), atol=1e-9)
    if x.sum() <= 0:
        assert np.array_equal(drift(x, u1, p), drift(x, u2, p))


@settings(max_examples=50, deadline=None)
@given(vec(2), simplex(2))
def test_drift_continuous_across_hyperplane(x, u):
    p = DriftParams([-0.5, -1.0], [1.0, 2.0], [0.4, 0.2])
    x = x - x.mean()  # <e,x> = 0
    eps = 1e-9
    up = drift(x + eps, u, p)
    down = drift(x - eps, u, p)
    assert np.allclose(up, down, atol=1e-6)


def test_spare_capacity_examples():
    p = DriftParams([-0.5, -1.0], [1, 2], [0, 0])
    beta, zeta, rec = spare_capacity_and_recenter(p)
    assert beta == pytest.approx(1.0)
    assert np.allclose(rec.ell, [-0.5, -1.0])
    assert rec.beta == pytest.approx(beta)
    beta, zeta, rec = spare_capacity_and_recenter(DriftParams([0, 0], [1, 3], [0, 0]))
    assert beta == 0 and np.allclose(zeta, 0) and np.allclose(rec.ell, 0)


@settings(max_examples=100, deadline=None)
@given(vec(2), simplex(2), arrays(np.float64, 2, elements=st.floats(-2, 2)),
       arrays(np.float64, 2, elements=st.floats(0.1, 5)), arrays(np.float64, 2, elements=st.floats(0, 3)))
def test_recentring_translation(x, u, ell, mu, gamma):
    p = DriftParams(ell, mu, gamma)
    _, zeta, rec = spare_capacity_and_recenter(p)
    # <e, zeta> = 0, so both sides sit on the same branch
    assert abs(zeta.sum()) < 1e-9
    assert np.allclose(drift(x - zeta, u, rec), drift(x, u, p), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(vec(2), simplex(2))
def test_generator_identity_pt4b(x, u):
    p = DriftParams.recentred(1.3, [1.0, 2.0], [0.0, 0.0])
    lhs = float(drift(x, u, p) @ (1.0 / p.mu))
    assert lhs == pytest.approx(-1.3 + max(-x.sum(), 0.0), abs=1e-9)


def test_effective_params():
    p = DriftParams([-0.5, -1.0], [1, 2], [0, 0])
    w = np.array([0.6, 0.8])
    th = np.array([0.1, -0.2])
    cp = CPMeasureSpec(0.7, w, RadialLaw("point", r=2.0), th)
    eff = effective_params(p, cp)
    assert np.allclose(eff.ell_tilde, p.ell + th + 0.7 * 2.0 * w)
    assert eff.beta_tilde == pytest.approx(-np.sum(eff.ell_tilde / p.mu))
    assert eff.theta_c == math.inf and eff.in_theta_c(50.0)
    par = effective_params(p, CPMeasureSpec(1.0, w, RadialLaw("pareto", theta=2.5, scale=0.5)))
    assert par.theta_c == 2.5 and par.in_theta_c(2.4) and not par.in_theta_c(2.6)
    heavy = effective_params(p, CPMeasureSpec(1.0, w, RadialLaw("pareto", theta=0.9, scale=0.5)))
    assert not heavy.large_jump_mean_finite and np.allclose(heavy.ell_tilde, p.ell)
    # inside the unit ball a point mass contributes nothing to ell~
    small = effective_params(p, CPMeasureSpec(1.0, w, RadialLaw("point", r=0.5)))
    assert np.allclose(small.ell_tilde, p.ell)


def test_policies():
    assert np.allclose(evaluate_policy(ControlPolicy.constant([0.2, 0.8]), [5.0, -1.0]), [0.2, 0.8])
    assert np.allclose(evaluate_policy(ControlPolicy.static_priority([0, 1]), [1.0, 1.0]), [0.0, 1.0])
    assert np.allclose(evaluate_policy(ControlPolicy.static_priority([1, 0]), [1.0, 1.0]), [1.0, 0.0])
    assert np.allclose(evaluate_policy(ControlPolicy.proportional(2), [2.0, 2.0]), [0.5, 0.5])
    bad = ControlPolicy.custom(lambda x: np.array([0.7, 0.7]), 2)
    with pytest.raises(PolicyError):
        evaluate_policy(bad, [1.0, 1.0])
    with pytest.raises(PolicyError):
        ControlPolicy.constant([0.5, 0.6])
    with pytest.raises(PolicyError):
        ControlPolicy.static_priority([0, 0])
    batch = evaluate_policy(ControlPolicy.custom(lambda x: np.abs(x) / np.abs(x).sum(), 2), np.array([[1., 3.], [2., 2.]]))
    assert np.allclose(batch, [[0.25, 0.75], [0.5, 0.5]])


def test_driver_validation():
    with pytest.raises(ParameterError):
        Driver.stable(2.0, [1.0])
    with pytest.raises(ParameterError):
        Driver.stable(1.5, [0.0, 1.0])
    with pytest.raises(ParameterError):
        Driver.brownian_cp([1.0, -1.0], CPMeasureSpec(1.0, np.array([1.0, 0.0]), RadialLaw("point", r=1.0)))
    with pytest.raises(ParameterError):
        Driver.brownian_cp([1.0], CPMeasureSpec(1.0, np.array([1.0, 0.0]), RadialLaw("point", r=1.0)))


def test_noise_free_fixed_point():
    p = DriftParams.recentred(1.0, [1.0, 2.0], [0.0, 0.0])
    path = simulate_path(p, ControlPolicy.constant([0.5, 0.5]), Driver.none(2), [-3.0, -1.0], 20.0, 0.01,
                         RngStream(0))
    assert np.allclose(path.states[-1], [-0.5, -0.5], atol=1e-6)
    assert np.all(np.diff(path.times) > 0)


def test_drift_free_stable_increments():
    drv = Driver.stable(1.5, [0.4, 1.0])
    n, dt = 10**5, 0.01
    out, _ = euler_ensemble(DriftParams.recentred(1.0, [1., 1.], [0., 0.]), ControlPolicy.constant([.5, .5]), drv,
                            np.zeros((n, 2)), dt, dt, RngStream(4), drift_free=True)
    sig = stable_scale_from_weight(drv.xi, 1.5) * dt ** (1 / 1.5)
    for i in range(2):
        for u in (0.5, 1.0, 2.0):
            z = u / sig[i]
            assert abs(np.mean(np.cos(z * out[0, :, i])) - math.exp(-u**1.5)) <= 4 / math.sqrt(n)


def test_brownian_short_time_variance():
    cp = CPMeasureSpec(0.0, np.array([1.0, 0.0]), RadialLaw("point", r=1.0))
    out, _ = euler_ensemble(DriftParams.recentred(1.0, [1., 1.], [0., 0.]), ControlPolicy.constant([.5, .5]),
                            Driver.brownian_cp([1.0, 1.0], cp), np.zeros((50000, 2)), 0.05, 0.005, RngStream(5),
                            drift_free=True)
    assert np.allclose(out[0].var(axis=0), 0.05, rtol=0.03)


def test_ensemble_matches_path_law_with_jumps():
    cp = CPMeasureSpec(2.0, np.array([0.6, 0.8]), RadialLaw("exponential", mean=0.5))
    drv = Driver.brownian_cp([0.3, 0.3], cp)
    p = DriftParams.recentred(1.0, [1.0, 2.0], [0.0, 0.0])
    pol = ControlPolicy.constant([0.5, 0.5])
    out, _ = euler_ensemble(p, pol, drv, np.zeros((20000, 2)), 1.0, 0.05, RngStream(8))
    ends = np.array([simulate_path(p, pol, drv, [0.0, 0.0], 1.0, 0.05, RngStream(9).child(i)).states[-1]
                     for i in range(2000)])
    se = np.sqrt(out[0].var(axis=0) / 20000 + ends.var(axis=0) / 2000)
    assert np.all(np.abs(out[0].mean(axis=0) - ends.mean(axis=0)) <= 4 * se)


def test_path_records_jumps_on_ray():
    w = np.array([0.6, 0.8])
    cp = CPMeasureSpec(3.0, w, RadialLaw("point", r=1.5))
    path = simulate_path(DriftParams.recentred(1.0, [1., 2.], [0., 0.]), ControlPolicy.constant([.5, .5]),
                         Driver.brownian_cp([0.1, 0.1], cp), [0.0, 0.0], 5.0, 0.1, RngStream(2))
    assert len(path.jump_times) > 0
    assert np.allclose(path.jump_sizes, 1.5 * w)
    assert set(np.round(path.jump_times, 12)) <= set(np.round(path.times, 12))


def test_determinism():
    args = (DriftParams.recentred(1.0, [1., 2.], [0., 0.]), ControlPolicy.constant([.5, .5]),
            Driver.stable(1.5, [0.25, 0.25]), np.zeros((100, 2)), 3.0, 0.01)
    a, _ = euler_ensemble(*args, RngStream(1, 2))
    b, _ = euler_ensemble(*args, RngStream(1, 2))
    assert np.array_equal(a, b)


def test_overflow_guard():
    p = DriftParams([0.0, 0.0], [1.0, 1.0], [0.0, 0.0])
    drv = Driver.stable(1.01, [1e40, 1e40])
    with pytest.raises(SimulationOverflow):
        euler_ensemble(p, ControlPolicy.constant([.5, .5]), drv, np.zeros((10, 2)), 1.0, 0.1, RngStream(0),
                       abort_on_overflow=True)
    _, aborted = euler_ensemble(p, ControlPolicy.constant([.5, .5]), drv, np.zeros((10, 2)), 1.0, 0.1, RngStream(0))
    assert aborted.any()
    with pytest.raises(ParameterError):
        simulate_path(p, ControlPolicy.constant([.5, .5]), drv, [0, 0], 1.0, 0.0, RngStream(0))
