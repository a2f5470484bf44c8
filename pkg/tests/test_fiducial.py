import numpy as np
import pytest

from fidcal import estimation as est
from fidcal import fiducial as fid
from fidcal.calibrate import IntervalEstimate
from fidcal.errors import ConfigurationError, InsufficientSampleError, QueryError, UndefinedPivotError
from fidcal.model import (
    CalibrationQuery,
    InterlabDataset,
    ModelParams,
    QueryDesign,
    draw_responses,
    simulate_dataset,
    simulate_query,
)

from conftest import DESIGN_A, SCENARIO_A, noise_free
import oracles


def _planted(params, data, seed=0):
    """Responses rebuilt from known auxiliaries, so the pivots can recover ``params``."""
    z = np.random.default_rng(seed).standard_normal((2, data.n_obs))
    i = data.lab
    y = draw_responses(params.alpha[i], params.beta[i], data.x, params.sigma_eta, params.sigma_eps, z[0], z[1])
    return data.with_measurements(y), z[0], z[1]


# -- closed-form pivots ----------------------------------------------------------


def test_init_pivots_hand_value():
    data = InterlabDataset(("1", "2"), [0.0, 10.0], {("1", 0): [0.0, 2.0], ("2", 0): [1.0, 3.0], ("1", 1): [10.0], ("2", 1): [11.0]})
    z = np.zeros(data.n_obs)
    z[data.x == 0] = [-1.0, 1.0, -1.0, 1.0]
    s, alpha = fid.init_pivots(data, z)
    assert s == 1.0
    np.testing.assert_allclose(alpha, [1.0, 2.0])


def test_init_pivots_identity_construction(data_a):
    sel = data_a.x == 0
    s_hat, a_hat = est.mme_zero_level(data_a)
    z = np.zeros(data_a.n_obs)
    z[sel] = (data_a.y[sel] - a_hat[data_a.lab[sel]]) / s_hat
    s, alpha = fid.init_pivots(data_a, z)
    assert s == pytest.approx(s_hat, rel=1e-14)
    np.testing.assert_allclose(alpha, a_hat, rtol=1e-13)


def test_init_pivots_degenerate_draw(data_a):
    with pytest.raises(Exception) as info:
        fid.init_pivots(data_a, np.zeros(data_a.n_obs))
    assert "degenerate" in type(info.value).__name__.lower() or "SS_z" in str(info.value)


def test_beta_pivot_hand_value():
    data = InterlabDataset(("1",), [0.0, 1.0], {("1", 0): [1.0], ("1", 1): [3.0]})
    z = np.array([0.3, -1.1])
    assert fid.beta_pivots(data, np.array([1.0]), 0.0, 0.0, z, z)[0] == 2.0


def test_alpha_pivot_hand_value():
    data = InterlabDataset(("1",), [0.0, 2.0], {("1", 0): [1.0], ("1", 1): [5.0]})
    z = np.array([0.7, 0.2])
    assert fid.alpha_pivots_updated(data, np.array([2.0]), 0.0, 0.0, z, z)[0] == 1.0


def test_closed_form_pivots_match_loops(data_a):
    rng = np.random.default_rng(3)
    ze, zp = rng.standard_normal((2, data_a.n_obs))
    s, a_init = fid.init_pivots(data_a, zp)
    by_lab_y, by_lab_z = {}, {}
    for i, x, y, z in zip(data_a.lab, data_a.x, data_a.y, zp):
        if x == 0:
            by_lab_y.setdefault(i, []).append(y)
            by_lab_z.setdefault(i, []).append(z)
    s_ref, a_ref = oracles.init_pivots_by_hand(by_lab_y, by_lab_z)
    assert s == pytest.approx(s_ref, rel=1e-14)
    np.testing.assert_allclose(a_init, [a_ref[i] for i in range(3)], rtol=1e-13)

    beta = fid.beta_pivots(data_a, a_init, s, 0.1, ze, zp)
    alpha = fid.alpha_pivots_updated(data_a, beta, s, 0.1, ze, zp)
    for i in range(3):
        rows = [(x, y, a, b) for l, x, y, a, b in zip(data_a.lab, data_a.x, data_a.y, ze, zp) if l == i]
        assert beta[i] == pytest.approx(oracles.beta_pivot_by_hand(rows, a_init[i], s, 0.1), rel=1e-13)
        assert alpha[i] == pytest.approx(oracles.alpha_pivot_by_hand(rows, beta[i], s, 0.1), rel=1e-12, abs=1e-13)


def test_noise_free_pivots_are_exact():
    data = noise_free()
    z = np.random.default_rng(0).standard_normal((2, data.n_obs))
    beta = fid.beta_pivots(data, np.array([1.0, 2.0]), 0.0, 0.0, z[0], z[1])
    np.testing.assert_allclose(beta, [1.0, 0.5], rtol=1e-14)
    alpha = fid.alpha_pivots_updated(data, np.array([1.0, 0.5]), 0.0, 0.0, z[0], z[1])
    np.testing.assert_allclose(alpha, [1.0, 2.0], rtol=1e-13)


def test_pivots_need_positive_levels():
    data = InterlabDataset(("1", "2"), [0.0, 5.0], {("1", 0): [0.0, 1.0], ("2", 0): [1.0, 2.0], ("1", 1): [5.0, 6.0]})
    with pytest.raises(UndefinedPivotError):
        fid.draw_parameter_fiducials(data, 0.1, 10, seed=0)


def test_variance_equations_match_loops(data_a):
    rng = np.random.default_rng(8)
    ze, zp = rng.standard_normal((2, data_a.n_obs))
    s, a_init = fid.init_pivots(data_a, zp)
    beta = fid.beta_pivots(data_a, a_init, s, 0.1, ze, zp)
    alpha = fid.alpha_pivots_updated(data_a, beta, s, 0.1, ze, zp)
    for se, sp in [(0.05, 0.7), (0.2, 1.3), (0.0, 1.0)]:
        r1, r2 = fid.variance_residuals(data_a, alpha, beta, se, sp, ze, zp)
        e1, e2, l1, l2 = oracles.variance_equations_by_hand(data_a, alpha, beta, se, sp, ze, zp)
        assert r1 == pytest.approx(e1 / l1, rel=1e-10, abs=1e-12)
        assert r2 == pytest.approx(e2 / l2, rel=1e-10, abs=1e-12)


# -- variance system --------------------------------------------------------------


def test_planted_root_is_recovered(data_a):
    truth = ModelParams([1.0, 0.5, 1.5], [1.0, 1.2, 0.9], 0.1, 1.0)
    data, ze, zp = _planted(truth, data_a, seed=4)
    se, sp, status = fid.solve_variance_system(data, truth.alpha, truth.beta, ze, zp, 0.1, 1.0)
    assert status in ("solved", "multiple_solutions_resolved")
    assert se == pytest.approx(0.1, abs=1e-7)
    assert sp == pytest.approx(1.0, abs=1e-7)


def test_exact_recovery_through_all_pivots(data_a):
    truth = ModelParams([1.0, 0.5, 1.5], [1.0, 1.2, 0.9], 0.1, 1.0)
    data, ze, zp = _planted(truth, data_a, seed=5)
    s, a_init = fid.init_pivots(data, zp)
    assert s == pytest.approx(1.0, rel=1e-12)
    beta = fid.beta_pivots(data, a_init, s, 0.1, ze, zp)
    alpha = fid.alpha_pivots_updated(data, beta, s, 0.1, ze, zp)
    np.testing.assert_allclose(beta, truth.beta, rtol=1e-12)
    np.testing.assert_allclose(alpha, truth.alpha, rtol=1e-10)
    se, sp, _ = fid.solve_variance_system(data, alpha, beta, ze, zp, 0.1, s)
    assert (se, sp) == pytest.approx((0.1, 1.0), abs=1e-7)


def test_noise_free_system_has_zero_root():
    data = noise_free()
    z = np.random.default_rng(2).standard_normal((2, data.n_obs))
    se, sp, status = fid.solve_variance_system(data, np.array([1.0, 2.0]), np.array([1.0, 0.5]), z[0], z[1], 0.0, 0.0)
    assert (se, sp, status) == (0.0, 0.0, "solved")


def test_solved_draws_satisfy_equations(data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 2000, seed=1)
    ok = draws.ok
    assert ok.mean() > 0.8
    assert np.nanmax(np.abs(draws.residuals[ok])) < 1e-8
    assert np.all(draws.sigma_eta[ok] >= 0) and np.all(draws.sigma_eps[ok] >= 0)
    # independent check on a few draws
    for d in np.flatnonzero(ok)[:5]:
        e1, e2, l1, l2 = oracles.variance_equations_by_hand(
            data_a, draws.alpha[d], draws.beta[d], draws.sigma_eta[d], draws.sigma_eps[d], draws.z_eta[d], draws.z_eps[d]
        )
        assert abs(e1) < 1e-8 * l1 and abs(e2) < 1e-8 * l2


def test_failure_rate_scenario_b(data_b):
    sig = est.fit_mme(data_b).sigma_eta
    draws = fid.draw_parameter_fiducials(data_b, sig, 10_000, seed=3, keep_aux=False)
    assert draws.n_failed / len(draws) < 0.02


# -- draws -------------------------------------------------------------------------


def test_zero_draws(data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 0, seed=0)
    assert len(draws) == 0 and list(draws) == []


def test_draws_are_deterministic_and_extend(data_a):
    a = fid.draw_parameter_fiducials(data_a, 0.1, 1500, seed=9)
    b = fid.draw_parameter_fiducials(data_a, 0.1, 1500, seed=9)
    c = fid.draw_parameter_fiducials(data_a, 0.1, 300, seed=9)
    np.testing.assert_array_equal(a.sigma_eta, b.sigma_eta)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.sigma_eta[:300], c.sigma_eta)


def test_draw_records_its_auxiliaries(data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 20, seed=2)
    d = next(i for i in range(20) if draws.ok[i])
    one = draws[d]
    s, a_init = fid.init_pivots(data_a, one.aux_z_eps)
    beta = fid.beta_pivots(data_a, a_init, s, 0.1, one.aux_z_eta, one.aux_z_eps)
    np.testing.assert_allclose(beta, one.beta_tilde, rtol=1e-12)
    se, sp, status = fid.solve_variance_system(data_a, one.alpha_tilde, one.beta_tilde, one.aux_z_eta, one.aux_z_eps, 0.1, s)
    assert (se, sp) == pytest.approx((one.sigma_eta_tilde, one.sigma_eps_tilde), rel=1e-9)
    assert status == one.status


def test_bad_draw_arguments(data_a):
    with pytest.raises(ConfigurationError):
        fid.draw_parameter_fiducials(data_a, -0.1, 10, seed=0)
    with pytest.raises(ConfigurationError):
        fid.draw_parameter_fiducials(data_a, 0.1, -1, seed=0)


@pytest.mark.slow
def test_parameter_pivots_sanity_scenario_a(data_a, fit_a):
    draws = fid.draw_parameter_fiducials(data_a, est.fit_mme(data_a).sigma_eta, 10_000, seed=4)
    ok = draws.ok
    # initial scale pivot against the pooled blank SD
    s_init = []
    for d in range(2000):
        s_init.append(fid.init_pivots(data_a, draws.z_eps[d])[0])
    pooled, _ = est.mme_zero_level(data_a)
    assert np.median(s_init) == pytest.approx(pooled, rel=0.10)
    np.testing.assert_allclose(np.median(draws.beta[ok], axis=0), fit_a.params.beta, rtol=0.10)
    lo, hi = np.quantile(draws.sigma_eps[ok], [0.025, 0.975])
    assert lo < 1.0 < hi


@pytest.mark.slow
def test_alpha_pivot_calibration_scenario_a():
    hits = 0
    n = 200
    for s in range(n):
        data = simulate_dataset(SCENARIO_A, DESIGN_A, seed=10_000 + s)
        draws = fid.draw_parameter_fiducials(data, est.fit_mme(data).sigma_eta, 500, seed=s, keep_aux=False)
        lo, hi = np.quantile(draws.alpha[draws.ok, 0], [0.025, 0.975])
        hits += lo <= 1.0 <= hi
    assert 0.91 <= hits / n <= 0.99


# -- concentration pivots ----------------------------------------------------------


def test_concentration_pivot_hand_values():
    assert fid.concentration_pivot([3.0, 5.0], [1.0, 1.0], [1.0, 1.0], 0.0, 0.0, [0.4, -2.0], [1.0, 3.0]) == 3.0
    assert fid.concentration_pivot([1.5 + 0.5 * 7], [1.5], [0.5], 0.0, 0.0, [0.9], [-0.3]) == pytest.approx(7.0, rel=1e-15)


def test_noise_free_concentration_sample():
    data = noise_free()
    draws = fid.draw_parameter_fiducials(data, 0.0, 200, seed=1)
    assert draws.n_failed == 0
    q = CalibrationQuery(("2",), ("u",), {("2", "u"): [2.0 + 0.5 * 7.0]})
    s = fid.concentration_pivots(q, draws, seed=2)["u"]
    np.testing.assert_allclose(s.values, 7.0, rtol=1e-12)
    iv = fid.hdi(s)
    assert iv.point == pytest.approx(7.0) and iv.width == pytest.approx(0.0, abs=1e-9)


def test_concentration_sample_bookkeeping(data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 3000, seed=6)
    q = simulate_query(SCENARIO_A, QueryDesign(("1",), 5), [0.0, 20.0], seed=1)
    samples = fid.concentration_pivots(q, draws, seed=3)
    for s in samples.values():
        assert s.values.size + s.n_failed == s.n_requested == 3000
        assert s.n_failed == draws.n_failed
        assert not s.truncated_at_zero
    assert np.any(samples["0"].values < 0)
    trunc = fid.concentration_pivots(q, draws, seed=3, truncate=True)["0"]
    assert trunc.truncated_at_zero and np.all(trunc.values >= 0)
    np.testing.assert_array_equal(trunc.values, np.maximum(samples["0"].values, 0))
    iv = fid.hdi(trunc)
    assert iv.lower == 0.0


def test_query_lab_must_be_known(data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 10, seed=6)
    q = CalibrationQuery(("9",), ("u",), {("9", "u"): [1.0]})
    with pytest.raises(QueryError):
        fid.concentration_pivots(q, draws, seed=1)


def test_sample_csv(tmp_path, data_a):
    draws = fid.draw_parameter_fiducials(data_a, 0.1, 500, seed=6)
    q = simulate_query(SCENARIO_A, QueryDesign(("1",), 5), [20.0], seed=1)
    s = fid.concentration_pivots(q, draws, seed=3)["20"]
    path = tmp_path / "s.csv"
    s.to_csv(path, draws.status)
    rows = path.read_text().splitlines()
    assert rows[0] == "draw_index,value,status"
    assert len(rows) == 501
    values = [float(r.split(",")[1]) for r in rows[1:] if r.split(",")[2] != "no_solution"]
    np.testing.assert_array_equal(values, s.values)


# -- density summaries -------------------------------------------------------------


def test_hdi_gaussian_oracle():
    v = np.random.default_rng(0).standard_normal(100_000)
    iv = fid.hdi(v, 0.95)
    assert iv.lower == pytest.approx(-1.959964, abs=0.05)
    assert iv.upper == pytest.approx(1.959964, abs=0.05)


def test_mode_gaussian_oracle():
    # with the Silverman bandwidth a single mode at n = 1e5 has sd near 0.06,
    # so the 0.05 window is applied to the average over independent samples
    modes = [fid.fiducial_mode(np.random.default_rng(s).standard_normal(100_000)) for s in range(10)]
    assert np.mean(modes) == pytest.approx(0.0, abs=0.05)
    assert np.max(np.abs(modes)) < 0.25


def test_hdi_symmetric_matches_equal_tailed():
    v = np.random.default_rng(1).logistic(3.0, 1.0, 20_000)
    iv = fid.hdi(v, 0.9)
    lo, hi = fid.equal_tailed(v, 0.9)
    bw = fid.kde(v).bandwidth
    assert abs(iv.lower - lo) < bw and abs(iv.upper - hi) < bw


def test_hdi_shorter_than_equal_tailed_for_skewed_sample():
    v = np.random.default_rng(2).gamma(2.0, 1.0, 20_000)
    iv = fid.hdi(v, 0.95)
    lo, hi = fid.equal_tailed(v, 0.95)
    assert iv.width <= hi - lo
    assert iv.lower < lo


def test_density_integrates_to_one():
    v = np.random.default_rng(3).normal(5, 2, 3000)
    d = fid.kde(v)
    assert d.grid.size == fid.KDE_GRID
    assert np.trapezoid(d.density, d.grid) == pytest.approx(1.0, abs=1e-12)
    assert d.grid[0] == pytest.approx(v.min() - 3 * d.bandwidth)


def test_constant_sample_mode():
    v = np.full(500, 4.25)
    assert fid.fiducial_mode(v) == 4.25
    iv = fid.hdi(v)
    assert (iv.lower, iv.upper, iv.point) == (4.25, 4.25, 4.25)


def test_small_sample_rejected():
    with pytest.raises(InsufficientSampleError):
        fid.hdi(np.arange(99.0))
    with pytest.raises(InsufficientSampleError):
        fid.fiducial_mode(np.arange(10.0))


def test_mode_at_zero_boundary_gives_one_sided_interval():
    v = np.abs(np.random.default_rng(4).standard_normal(5000))
    s = fid.FiducialSample(v, 5000, 0, True)
    iv = fid.hdi(s)
    assert iv.lower == 0.0
    assert iv.point == pytest.approx(0.0, abs=0.05)
    assert iv.upper == pytest.approx(1.96, abs=0.1)


def test_untruncated_sample_interval_is_clipped():
    v = np.random.default_rng(5).normal(0.3, 1.0, 5000)
    s = fid.FiducialSample(v, 5000, 0, False)
    iv = fid.hdi(s)
    raw = fid.hdi(v)
    assert iv.lower == 0.0 and iv.upper == pytest.approx(raw.upper)
    assert iv.point == pytest.approx(raw.point)
    neg = fid.FiducialSample(v - 10.0, 5000, 0, False)
    empty = fid.hdi(neg)
    assert empty.empty and empty.lower == empty.upper == 0.0
    assert isinstance(empty, IntervalEstimate)
