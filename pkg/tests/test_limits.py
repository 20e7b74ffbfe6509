import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import BERN, F, one_type
from mbpire import limits, sim
from mbpire.env import build_iid_env
from mbpire.sim import env_rows
from mbpire.errors import DegenerateVariance, Supercritical
from mbpire.laws import FiniteLaw, moments
from mbpire.rng import derive, stream

IIDENV_VAR_F = 0.9375 / 0.6875 - 1.0  # variance of sum_k m(w_0)...m(w_k) for the two-state i.i.d. environment


def test_lyapunov_scalar_constant(const_env):
    tables = one_type([BERN], [BERN])
    est = limits.lyapunov(const_env, tables, 50, 100, 0)
    assert est.reps == 1 and est.stderr == 0.0
    assert abs(est.gamma_hat - math.log(0.5)) < 1e-12
    assert est.gate()


def test_lyapunov_two_type_spectral_radius(const_env, two_type):
    est = limits.lyapunov(const_env, two_type, 2000, 10, 0)
    assert abs(est.gamma_hat - math.log(0.6)) <= 3 * est.stderr + limits.FLOAT_FLOOR


def test_lyapunov_iid_scalar(iid_env, iidenv_tables):
    est = limits.lyapunov(iid_env, iidenv_tables, 1000, 300, 3)
    assert est.stderr > 0
    assert abs(est.gamma_hat - 0.5 * math.log(3 / 16)) <= 3 * est.stderr


def test_lyapunov_dead_offspring_is_minus_inf(const_env):
    est = limits.lyapunov(const_env, one_type([FiniteLaw.point(0)], [BERN]), 20, 5, 0)
    assert est.gamma_hat == -math.inf and est.gate()


def test_lyapunov_needs_horizon(const_env, bern):
    with pytest.raises(ValueError):
        limits.lyapunov(const_env, bern, 9, 10, 0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.2, 0.8))
def test_lyapunov_scalar_matches_mean_log(a, b, w):
    env = build_iid_env([w, 1 - w])
    tables = one_type([F([(0, 1 - a), (1, a)]), F([(0, 1 - b), (1, b)])], [BERN, BERN])
    est = limits.lyapunov(env, tables, 200, 200, 1)
    target = w * math.log(a) + (1 - w) * math.log(b)
    assert est.stderr >= 0
    assert abs(est.gamma_hat - target) <= 4 * est.stderr + 1e-12


def test_kappa_rate(const_env, bern, no_immigration):
    n = 40
    # every factor of the kappa-moment product is 0.5^(1/3): the rate is (n+1)/n ln 0.5
    assert limits.kappa_rate(const_env, bern, 3.0, n, 10, 0) == pytest.approx((n + 1) / n * math.log(0.5), abs=1e-12)
    assert limits.kappa_rate(const_env, no_immigration, 3.0, n, 10, 0) == -math.inf
    m = one_type([F([(0, 0.01), (1, 0.99)])], [BERN])
    r = limits.kappa_rate(const_env, m, 3.0, 500, 10, 0)
    assert r < 0 and r == pytest.approx(math.log(0.99) + math.log(0.5) / 500, abs=1e-12)
    with pytest.raises(ValueError):
        limits.kappa_rate(const_env, bern, 2.0, n, 10, 0)


def test_rho_series_examples(const_env, bern, two_type, no_immigration):
    r = limits.rho_series(const_env, bern, 1e-10, 10, 0)
    assert abs(r.value[0] - 0.5) <= r.tail_bound + 1e-12 and r.tail_bound >= 0 and not r.divergent
    r = limits.rho_series(const_env, two_type, 1e-10, 10, 0)
    np.testing.assert_allclose(r.value, [13 / 28, 2 / 7], atol=r.tail_bound + 1e-12)
    r = limits.rho_series(const_env, no_immigration, 1e-10, 10, 0)
    assert np.all(r.value == 0) and r.tail_bound == 0


def test_rho_series_divergent(const_env):
    tables = one_type([F([(0, 0.5), (2, 0.5)])], [BERN])
    r = limits.rho_series(const_env, tables, 1e-6, 2, 0, max_terms=2048)
    assert r.divergent and np.all(np.isinf(r.value)) and r.tail_bound == math.inf


def test_rho_iid_closed_form(bern, iidenv_tables, iid_env):
    assert limits.rho_iid_closed_form(bern, [1.0])[0] == pytest.approx(0.5)
    assert limits.rho_iid_closed_form(iidenv_tables, [0.5, 0.5])[0] == pytest.approx(0.5)
    with pytest.raises(Supercritical):
        limits.rho_iid_closed_form(one_type([FiniteLaw.point(1)], [BERN]), [1.0])
    r = limits.rho_series(iid_env, iidenv_tables, 1e-10, 4000, 5)
    assert abs(r.value[0] - 0.5) <= 3 * r.stderr[0] + r.tail_bound


def test_lln_examples(const_env, bern, no_immigration):
    rho = limits.rho_series(const_env, bern, 1e-12, 1, 0)
    traj = sim.simulate(const_env, bern, 200_000, 4)
    ok = limits.lln_check(traj, rho)
    assert ok.passed and ok.values["deviation"] <= ok.values["band"]
    wrong = limits.RhoEstimate(np.array([0.6]), 1, 0.0, np.zeros(1))
    assert not limits.lln_check(traj, wrong).passed
    zero = limits.lln_check(sim.simulate(const_env, no_immigration, 1000, 0),
                            limits.rho_series(const_env, no_immigration, 1e-9, 1, 0))
    assert zero.passed and zero.values["deviation"] == 0.0


def test_clt_samples_examples(const_env, bern, no_immigration):
    s = limits.clt_samples(const_env, no_immigration, [0.0], 200, 100, 0)
    assert not s.samples.any()
    s = limits.clt_samples(const_env, bern, [0.5], 2000, 800, 1)
    assert s.samples.shape == (800, 1)
    assert limits.variance_check(s, [[1.25]]).passed
    with pytest.raises(ValueError):
        limits.clt_samples(const_env, bern, [0.5], 10, 50, 0)


def test_clt_mean_decays_at_root_n(const_env, bern):
    # E S_n - n rho tends to a constant, so the mean of the normalised sums halves when n quadruples
    ratios = []
    for seed in range(3):
        small = limits.clt_samples(const_env, bern, [0.5], 25, 5000, derive(seed, "small")).samples.mean()
        large = limits.clt_samples(const_env, bern, [0.5], 100, 5000, derive(seed, "large")).samples.mean()
        ratios.append(large / (0.5 * small))
    assert 0.3 <= math.sqrt(np.mean(np.square(ratios))) <= 1.7


def test_covariance_constant_environment(const_env, bern):
    cov = limits.clt_covariance(const_env, bern, 5, 100_000, 2)
    assert not cov.lag_terms.any() and cov.remainder_bound == 0.0
    assert abs(cov.sigma[0, 0] - 1.25) <= 3 * cov.stderr[0, 0]
    assert cov.psd and np.allclose(cov.sigma, cov.sigma.T)


def test_covariance_two_type_symmetric(const_env, two_type):
    cov = limits.clt_covariance(const_env, two_type, 3, 20_000, 3)
    np.testing.assert_array_equal(cov.sigma, cov.sigma.T)
    assert cov.psd and np.all(np.diag(cov.sigma) > 0)


def test_iid_environment_lag_terms(iid_env, iidenv_tables):
    mom = moments(iidenv_tables)
    reps = 200_000
    R = limits._expected_progeny(env_rows(iid_env, 60, reps, stream(9, "lags")), mom.M, mom.I, 4)[:, :, 0]
    Rc = R - R.mean(axis=0)
    for n in range(1, 5):
        prod = Rc[:, 0] * Rc[:, n]
        exact = 0.25 * 0.5**n * IIDENV_VAR_F
        assert abs(prod.mean() - exact) <= 3 * prod.std() / math.sqrt(reps)


def test_covariance_matches_clt_sample_variance(iid_env, iidenv_tables):
    cov = limits.clt_covariance(iid_env, iidenv_tables, 20, 40_000, 4)
    assert np.isfinite(cov.remainder_bound) and cov.remainder_bound >= 0
    s = limits.clt_samples(iid_env, iidenv_tables, [0.5], 4000, 600, 5)
    var = s.samples.var(ddof=1)
    joint = math.hypot(cov.stderr[0, 0], limits.stats.variance_se(s.samples))
    assert abs(var - cov.sigma[0, 0]) <= 3 * joint + cov.remainder_bound


def test_normality_examples():
    assert limits.normality_test(np.zeros(200), 0.0).passed
    with pytest.raises(DegenerateVariance):
        limits.normality_test(np.arange(200.0), 0.0)
    rng = stream(0, "normal")
    assert limits.normality_test(rng.standard_normal(2000), 1.0).passed
    # a uniform law with the matching variance is still rejected
    assert not limits.normality_test(rng.uniform(-1, 1, 2000), 1 / 3).passed


def test_nondegeneracy(const_env, bern, no_immigration):
    det = one_type([FiniteLaw.point(0)], [FiniteLaw.point(2)])
    for tables in (det, no_immigration):
        c = limits.nondegeneracy_check(const_env, tables, 0, 2000, 0)
        assert c.values["statistic"] == 0.0 and c.values["degenerate"] and not c.passed
    c = limits.nondegeneracy_check(const_env, bern, 0, 50_000, 1)
    assert c.passed and abs(c.values["statistic"] - 1.25) <= 3 * c.values["stderr"]


def test_extinction_tail(const_env, bern, two_type, no_immigration):
    np.testing.assert_allclose(limits.survival_bounds(const_env, bern, 10), 0.5 ** np.arange(2, 12))
    c = limits.extinction_tail_check(const_env, bern, 10, 100_000, 0)
    emp, se = np.array(c.values["empirical"]), np.array(c.values["stderr"])
    assert c.passed and np.all(np.abs(emp - 0.5 ** np.arange(2, 12)) <= 3 * se + 1e-12)
    c = limits.extinction_tail_check(const_env, no_immigration, 5, 1000, 0)
    assert c.passed and not any(c.values["empirical"]) and not any(c.values["bound"])
    assert limits.extinction_tail_check(const_env, two_type, 12, 50_000, 1).passed


def test_stats_report_passed():
    rep = limits.StatsReport()
    rep.add(limits.Check("a", True, "sigmas"))
    rep.add(limits.Check("b", None, "sigmas"))
    assert rep.passed
    rep.add(limits.Check("c", False, "alpha"))
    assert not rep.passed and rep.as_dict()["checks"][2]["tolerance"] == "alpha"
