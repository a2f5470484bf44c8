"""Hypothesis checks of invariants that should hold for any valid input."""

import io
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from fidcal import calibrate as cal
from fidcal import fiducial as fid
from fidcal import simharness as S
from fidcal.model import (
    Design,
    InterlabDataset,
    ModelParams,
    calibration_band,
    response_moments,
    simulate_dataset,
)

from conftest import DESIGN_A

SLOW = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
positive = st.floats(0.05, 5.0)
seeds = st.integers(0, 2**32 - 1)


@st.composite
def params(draw, q=3):
    return ModelParams(
        alpha=np.array([draw(finite) for _ in range(q)]),
        beta=np.array([draw(st.floats(0.1, 3.0)) for _ in range(q)]),
        sigma_eta=draw(st.floats(0.0, 0.5)),
        sigma_eps=draw(st.floats(0.01, 3.0)),
    )


@settings(deadline=None)
@given(params(), st.floats(0.0, 100.0))
def test_moment_formula(p, x):
    mean, var = response_moments(p, 0, x)
    w = math.exp(p.sigma_eta**2)
    assert mean == pytest.approx(p.alpha[0] + p.beta[0] * x * math.sqrt(w))
    assert var == pytest.approx(p.beta[0] ** 2 * x**2 * (w - 1) * w + p.sigma_eps**2)
    assert var >= p.sigma_eps**2 * (1 - 1e-12)


@settings(deadline=None)
@given(params(), st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_variance_nondecreasing_in_x(p, a, b):
    lo, hi = sorted((a, b))
    assert response_moments(p, 1, lo)[1] <= response_moments(p, 1, hi)[1] * (1 + 1e-12)


@SLOW
@given(params(), seeds)
def test_band_nesting(p, seed):
    grid = np.linspace(0.0, 40.0, 9)
    lo90, hi90 = calibration_band(p, 2, grid, 0.90, 2000, seed)
    lo99, hi99 = calibration_band(p, 2, grid, 0.99, 2000, seed)
    assert np.all(lo99 <= lo90) and np.all(hi90 <= hi99)


@SLOW
@given(params(), seeds)
def test_simulation_is_pure(p, seed):
    a = simulate_dataset(p, DESIGN_A, seed)
    b = simulate_dataset(p, DESIGN_A, seed)
    assert np.array_equal(a.y, b.y)


@SLOW
@given(params(), seeds)
def test_dataset_csv_round_trip(p, seed):
    data = simulate_dataset(p, Design((0.0, 3.0, 7.5), 2, q=3), seed)
    buf = io.StringIO()
    data.to_csv(buf)
    buf.seek(0)
    back = InterlabDataset.from_csv(buf)
    assert back.to_records() == data.to_records()


@SLOW
@given(params(), seeds, seeds)
def test_pivots_are_functions_of_data_and_z(p, data_seed, z_seed):
    data = simulate_dataset(p, DESIGN_A, data_seed)
    rng = np.random.default_rng(z_seed)
    z_eta, z_eps = rng.standard_normal(data.n_obs), rng.standard_normal(data.n_obs)
    s0, a0 = fid.init_pivots(data, z_eps)
    assume(s0 > 0)
    b1 = fid.beta_pivots(data, a0, s0, 0.1, z_eta, z_eps)
    b2 = fid.beta_pivots(data, a0, s0, 0.1, z_eta.copy(), z_eps.copy())
    assert np.array_equal(b1, b2)
    a1 = fid.alpha_pivots_updated(data, b1, s0, 0.1, z_eta, z_eps)
    assert np.array_equal(a1, fid.alpha_pivots_updated(data, b2, s0, 0.1, z_eta, z_eps))


samples = st.builds(
    lambda seed, loc, scale, skew: loc + scale * np.random.default_rng(seed).gamma(skew, size=800),
    seeds, st.floats(-20, 20), st.floats(0.1, 10), st.floats(0.5, 20),
)


@SLOW
@given(samples, st.sampled_from([0.8, 0.9, 0.95]))
def test_hdi_not_wider_than_equal_tailed(v, level):
    iv = fid.hdi(v, level)
    lo, hi = fid.equal_tailed(v, level)
    # the KDE smooths the tails, so allow a little slack against raw quantiles
    slack = 0.05 * (hi - lo) + 4 * fid.silverman_bandwidth(v)
    assert iv.width <= (hi - lo) + slack
    assert iv.lower <= iv.point <= iv.upper


@SLOW
@given(samples)
def test_nonnegative_restriction(v):
    iv = fid.hdi(v, 0.95, nonnegative=True)
    assert iv.lower >= 0.0 and iv.upper >= iv.lower
    raw = fid.hdi(v, 0.95, nonnegative=False)
    if raw.upper >= 0:
        assert iv.upper == raw.upper and iv.lower == max(raw.lower, 0.0)
    else:
        assert iv.empty


@given(
    st.floats(-10, 10), st.floats(0, 10), st.floats(-20, 20), st.floats(0, 5)
)
def test_exceedance_monotone(lower, width, rt, step):
    iv = cal.IntervalEstimate(lower, lower + width, 0.95, "fiducial_hdi", lower)
    if cal.assess_exceedance(iv, rt + step):
        assert cal.assess_exceedance(iv, rt)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0, 100))
def test_point_metrics_properties(est, truth):
    b, ab, rmse = S.point_metrics(est, truth)
    assert abs(b) <= ab * (1 + 1e-12) + 1e-12
    assert ab <= rmse * (1 + 1e-12) + 1e-12
    scale = truth if truth > 0 else 1.0
    d = np.asarray(est) - truth
    assert rmse == pytest.approx(math.sqrt(np.mean(d * d)) / scale, rel=1e-9, abs=1e-12)


@given(st.floats(0, 1000), st.floats(0.1, 3), st.floats(-5, 5), st.floats(0, 0.5),
       st.floats(0, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_concentration_pivot_inverts_the_model(x, beta, alpha, s_eta, s_eps, ze, zp):
    # the pivot solves the single-response model equation for x
    y = alpha + beta * x * math.exp(s_eta * ze) + s_eps * zp
    got = fid.concentration_pivot([y], [alpha], [beta], s_eta, s_eps, [ze], [zp])
    assert got == pytest.approx(x, rel=1e-9, abs=1e-9 * (1 + abs(y)))
