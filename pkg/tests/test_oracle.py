import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import BERN, F, one_type, three_sigma
from mbpire import oracle, sim
from mbpire.env import build_iid_env
from mbpire.errors import CapTooSmall, NotSingleType, ZeroMass
from mbpire.laws import FiniteLaw, MinorizationSpec, residual_law
from mbpire.rng import stream

BERN_PI0 = 0.5775761901732  # prod_{k>=1} (1 - 2^-(k+1)), frozen from the product oracle


def test_kernel_rows_conserve_mass(bern, two_type):
    for tables, K in [(bern, 10), (two_type, 6)]:
        k = oracle.build_quenched_kernel(tables, 0, 0, K)
        np.testing.assert_allclose(k.P.sum(axis=1) + k.leakage, 1.0, atol=1e-12)
        assert np.all(k.P >= 0)


def test_kernel_dead_offspring(const_env):
    tables = one_type([FiniteLaw.point(0)], [BERN])
    k = oracle.build_quenched_kernel(tables, 0, 0, 5)
    np.testing.assert_array_equal(k.P[:, 0], 1.0)


def test_kernel_bern_rows(bern):
    k = oracle.build_quenched_kernel(bern, 0, 0, 5)
    np.testing.assert_allclose(k.row(0)[:2], [0.75, 0.25], atol=1e-15)
    no_imm = oracle.build_quenched_kernel(one_type([BERN], [FiniteLaw.point(0)]), 0, 0, 5)
    np.testing.assert_allclose(no_imm.row(1)[:2], [0.5, 0.5], atol=1e-15)


def test_kernel_uses_previous_state_for_immigration():
    tables = one_type([BERN, BERN], [FiniteLaw.point(0), FiniteLaw.point(2)])
    k = oracle.build_quenched_kernel(tables, 0, 1, 4)
    np.testing.assert_allclose(k.row(0)[:3], [0.25, 0.5, 0.25])
    k = oracle.build_quenched_kernel(tables, 1, 0, 4)
    assert k.row(0)[0] == 1.0


def test_kernel_cap_ceiling():
    tables = one_type([F([(0, 0.5), (3, 0.5)])], [BERN])
    with pytest.raises(CapTooSmall):
        oracle.build_quenched_kernel(tables, 0, 0, 3, max_row_leakage=1e-3)


laws = st.lists(st.floats(0.05, 1.0), min_size=2, max_size=3).map(
    lambda w: F([(i, x / sum(w)) for i, x in enumerate(w)]))


@settings(max_examples=20, deadline=None)
@given(laws, laws, st.floats(0.01, 0.3))
def test_decomposed_kernel_equals_plain(off, imm, eps):
    tables = one_type([off], [imm])
    spec = MinorizationSpec(eps, (FiniteLaw.point(0),), FiniteLaw.point(0))
    if off.prob(0) < eps or imm.prob(0) < eps:
        return
    plain = oracle.build_quenched_kernel(tables, 0, 0, 6)
    dec = oracle.build_decomposed_kernel(tables, spec, 0, 0, 6)
    np.testing.assert_allclose(dec.P, plain.P, atol=1e-12)


def test_decomposed_kernel_two_type(two_type):
    zero = FiniteLaw.point((0, 0))
    spec = MinorizationSpec(0.3, (zero, zero), zero)
    plain = oracle.build_quenched_kernel(two_type, 0, 0, 5)
    dec = oracle.build_decomposed_kernel(two_type, spec, 0, 0, 5)
    assert np.abs(dec.P - plain.P).max() <= 1e-12


def test_stationary_pi_without_immigration(no_immigration):
    pt = oracle.stationary_pi(no_immigration, [0], 10)
    assert pt.pi_zero == 1.0 and pt.pi.sum() == 1.0


def test_stationary_pi_bern(bern):
    pt = oracle.stationary_pi(bern, [0], 40)
    target = oracle.pi_zero_bernoulli_product(0.5, 0.5)
    assert abs(pt.pi_zero - target) <= pt.error_bound + 1e-12
    assert pt.error_bound < 1e-8
    assert abs(pt.mean()[0] - 0.5) <= 40 * pt.error_bound + 1e-9
    assert pt.pi.sum() <= 1.0 and 1.0 - pt.pi.sum() <= pt.leakage_bound + 1e-15


def test_stationary_pi_invariant_and_tv_monotone(bern, two_type):
    for tables, K in [(bern, 40), (two_type, 14)]:
        pt = oracle.stationary_pi(tables, [0], K)
        k = oracle.build_quenched_kernel(tables, 0, 0, K)
        assert oracle.tv(pt.pi.ravel() @ k.P, pt.pi) < 1e-10
        dists = [oracle.tv(oracle.law_after(tables, [0], K, n), pt.pi) for n in range(0, 61, 5)]
        assert all(b <= a + 2 * pt.error_bound for a, b in zip(dists, dists[1:]))
        assert dists[-1] < 1e-6


def test_stationary_pi_periodic_phase(bern):
    tables = one_type([BERN, FiniteLaw.point(0)], [BERN, BERN])
    p0 = oracle.stationary_pi(tables, [0, 1], 20)
    p1 = oracle.stationary_pi(tables, [1, 0], 20)
    # after a state-1 step everybody has died; only fresh immigrants remain
    assert p0.pi_zero == pytest.approx(1.0)
    assert p1.pi_zero == pytest.approx(0.75)


def test_stationary_pi_cap_too_small():
    tables = one_type([F([(0, 0.3), (1, 0.6), (2, 0.1)])], [F([(0, 0.2), (3, 0.8)])])
    with pytest.raises(CapTooSmall):
        oracle.stationary_pi(tables, [0], 3)


def test_product_oracle():
    assert oracle.pi_zero_bernoulli_product(0.5, 0.0) == 1.0
    assert oracle.pi_zero_bernoulli_product(0.0, 0.5) == 1.0
    assert oracle.pi_zero_bernoulli_product(0.5, 0.5) == pytest.approx(BERN_PI0, abs=1e-12)
    with pytest.raises(ValueError):
        oracle.pi_zero_bernoulli_product(1.0, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.0, 0.9))
def test_product_matches_kernel_fixed_point(p, q):
    tables = one_type([F([(0, 1 - p), (1, p)])], [F([(0, 1 - q), (1, q)])])
    pt = oracle.stationary_pi(tables, [0], 30)
    assert abs(pt.pi_zero - oracle.pi_zero_bernoulli_product(p, q)) <= pt.error_bound + 1e-11


def test_kac():
    assert oracle.kac_mu(1.0) == 1.0
    assert abs(oracle.kac_mu(BERN_PI0) * BERN_PI0 - 1.0) < 1e-12
    with pytest.raises(ZeroMass):
        oracle.kac_mu(0.0)


def test_pi_zero_agrees_with_regeneration_frequency(bern):
    pt = oracle.stationary_pi(bern, [0], 40)
    t = sim.simulate(build_iid_env([1.0]), bern, 200_000, 21)
    nu = sim.regeneration_times(t.Z)
    freq = (len(nu) - 1) / t.n
    # regeneration frequency is dependent; a generous batch band
    assert abs(freq - pt.pi_zero) < 0.01
    assert abs(freq - oracle.pi_zero_bernoulli_product(0.5, 0.5)) < 0.01


def test_geometric_fit_null_and_errors(bern, two_type):
    x = stream(3, "geom").geometric(0.4, 20_000) - 1
    fit = oracle.geometric_fit_kks(bern, x)
    assert fit.pvalue >= 0.01 and fit.parameter == pytest.approx(0.4, abs=0.02)
    with pytest.raises(NotSingleType):
        oracle.geometric_fit_kks(two_type, x)


def test_zero_mass_criterion(const_env, iid_env, bern, two_type, counterex_env, counterex_tables):
    r = oracle.zero_mass_criterion(bern, const_env, 1, 5)
    assert r.holds_some_m and r.holds_one_step
    one = one_type([FiniteLaw.point(1)], [BERN])
    r = oracle.zero_mass_criterion(one, const_env, 3, 10)
    assert not r.holds_some_m and not r.holds_one_step
    r = oracle.zero_mass_criterion(two_type, const_env, 1, 4)
    assert r.holds_one_step
    r = oracle.zero_mass_criterion(counterex_tables, counterex_env, 2, 5)
    assert r.holds_some_m and not r.holds_one_step and r.blocking[1] == 0
    with pytest.raises(CapTooSmall):
        oracle.zero_mass_criterion(one_type([FiniteLaw.point(2)], [BERN]), const_env, 2, 3)


def test_random_environment_pi_counterexample(counterex_env, counterex_tables):
    pt = oracle.stationary_pi_random(counterex_env, counterex_tables, 40, 4000, 7)
    assert abs(pt.pi_zero - 4 / 7) < 3 * pt.stderr.ravel()[0] + pt.error_bound + 1e-9


def test_random_environment_pi_is_average_of_quenched(iid_env, iidenv_tables):
    pt = oracle.stationary_pi_random(iid_env, iidenv_tables, 20, 3000, 8)
    assert 0.0 <= 1.0 - pt.pi.sum() <= pt.leakage_bound + 1e-12
    # rho = 0.5 for this configuration
    assert abs(pt.mean()[0] - 0.5) < 3 * pt.mean_stderr[0] + 20 * pt.error_bound + 1e-9


def test_palm_bern(const_env, bern):
    res = oracle.palm_identity_check(const_env, bern, {1: [0]}, 20, 40_000, 5)
    assert res.passed
    assert abs(res.palm - 0.75) < 3 * res.palm_se
    assert abs(res.weighted - 0.75) < 3 * res.weighted_se


def test_palm_without_immigration(const_env, no_immigration):
    res = oracle.palm_identity_check(const_env, no_immigration, {1: [0], 2: [0]}, 5, 2000, 1)
    assert res.palm == 1.0 and res.weighted == 1.0 and res.passed


def test_palm_random_environment(markov_env, markov_tables):
    res = oracle.palm_identity_check(markov_env, markov_tables, {1: [0]}, 25, 20_000, 2)
    assert res.zero_weight_fraction == 0.0 and res.passed


def test_pattern_probability(bern):
    assert oracle.pattern_probability(bern, [0], 10, {1: [0]}) == pytest.approx(0.75)
    assert oracle.pattern_probability(bern, [0], 10, {1: [1], 2: [0]}) == pytest.approx(0.25 * 0.375)
    pt = oracle.stationary_pi(bern, [0], 40)
    start = np.zeros_like(pt.pi)
    start[0] = 1.0
    assert oracle.pattern_probability(bern, [0], 40, {1: [0]}, start) == pytest.approx(0.75)
