import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import BERN, F, one_type, three_sigma
from mbpire import oracle, sim
from mbpire.env import build_iid_env
from mbpire.errors import CapExceeded, DominationViolated, InvalidTables
from mbpire.laws import FiniteLaw, MinorizationSpec, residual_law
from mbpire.rng import stream


def test_simulate_shapes_and_start(const_env, bern):
    t = sim.simulate(const_env, bern, 100, 1)
    assert t.Z.shape == (101, 1) and t.X.shape == (100, 1) and t.n == 100
    assert np.all(t.Z[0] == 0)
    assert t.Z.dtype == np.int64 and np.all(t.Z >= 0)
    np.testing.assert_array_equal(t.S[-1], t.Z[:-1].sum(axis=0))


def test_simulate_is_reproducible(iid_env, iidenv_tables):
    a = sim.simulate(iid_env, iidenv_tables, 500, 11)
    b = sim.simulate(iid_env, iidenv_tables, 500, 11)
    c = sim.simulate(iid_env, iidenv_tables, 500, 12)
    assert np.array_equal(a.Z, b.Z) and np.array_equal(a.env.states, b.env.states)
    assert not np.array_equal(a.Z, c.Z)


def test_dead_offspring_gives_zero(const_env):
    tables = one_type([FiniteLaw.point(0)], [BERN])
    t = sim.simulate(const_env, tables, 200, 2)
    assert not t.Z.any()


def test_immigrants_reproduce_in_their_arrival_step(const_env):
    # every immigrant has exactly one child, which is counted one step later
    tables = one_type([FiniteLaw.point(0)], [FiniteLaw.point(1)])
    assert not sim.simulate(const_env, tables, 10, 0).Z.any()
    tables = one_type([FiniteLaw.point(1)], [FiniteLaw.point(1)])
    np.testing.assert_array_equal(sim.simulate(const_env, tables, 5, 0).Z[:, 0], [0, 1, 2, 3, 4, 5])


def test_mismatched_tables_rejected(iid_env, bern):
    with pytest.raises(InvalidTables):
        sim.simulate(iid_env, bern, 10, 0)


def test_supercritical_blowup_raises(const_env):
    tables = one_type([FiniteLaw.point(2)], [FiniteLaw.point(1)])
    with pytest.raises(CapExceeded):
        sim.simulate(const_env, tables, 100, 0)


@pytest.mark.parametrize("z", [0, 1, 2, 3])
def test_one_step_frequencies_match_kernel_single_type(const_env, bern, z):
    rng = stream(5, "step", z)
    n = 40_000
    env = np.zeros((n, 2), dtype=np.int64)
    Z, _ = sim.run_paths(env, bern, rng, np.full((n, 1), z))
    counts = np.bincount(Z[:, 1, 0], minlength=8)[:8] / n
    row = oracle.build_quenched_kernel(bern, 0, 0, 7).row(z)
    assert np.all(np.abs(counts - row) <= three_sigma(row, n) + 1e-12)


def test_one_step_frequencies_match_kernel_two_types(const_env, two_type):
    n = 60_000
    K = 6
    kernel = oracle.build_quenched_kernel(two_type, 0, 0, K)
    for z in [(0, 0), (1, 0), (1, 2)]:
        env = np.zeros((n, 2), dtype=np.int64)
        Z, _ = sim.run_paths(env, two_type, stream(6, *z), np.tile(z, (n, 1)))
        nxt = Z[:, 1, :]
        inside = np.all(nxt <= K, axis=1)
        freq = np.zeros((K + 1, K + 1))
        np.add.at(freq, (nxt[inside, 0], nxt[inside, 1]), 1.0 / n)
        row = kernel.row(z)
        assert np.all(np.abs(freq - row) <= three_sigma(row, n) + 1e-12)


def test_step_matches_run_paths(const_env, bern):
    z = sim.step([3], [1], 0, bern, stream(1, "x"))
    assert z.shape == (1,) and 0 <= z[0] <= 4


def test_clan_progeny_law(const_env, bern):
    reps = 200_000
    tau, Y = sim.clan_batch(const_env, bern, reps, 9)
    y = Y[:, 0, 0]
    assert abs(y.mean() - 0.5) < 3 * np.sqrt(1.25 / reps)
    for k in range(6):
        p = 0.75 if k == 0 else 0.5 ** (k + 2)
        assert abs((y == k).mean() - p) < three_sigma(p, reps)
    for n in range(1, 11):
        p = 0.5 ** (n + 1)
        assert abs((tau[:, 0] > n).mean() - p) < three_sigma(p, reps) + 1e-12


def test_single_clan_record(const_env, bern):
    rec = sim.total_progeny(const_env, bern, origin=-4, seed=3)
    assert rec.extinct and rec.origin == -4
    assert rec.U[rec.tau].sum() == 0 and np.all(rec.U[1:rec.tau].sum(axis=1) > 0)
    np.testing.assert_array_equal(rec.Y, rec.U[1:].sum(axis=0))
    alive = sim.clan_progeny(const_env, one_type([FiniteLaw.point(1)], [FiniteLaw.point(1)]), 0, 5, 0)
    assert not alive.extinct and alive.U.shape[0] == 6
    with pytest.raises(CapExceeded):
        sim.total_progeny(const_env, one_type([FiniteLaw.point(1)], [FiniteLaw.point(1)]), 0, 0, cap=50)


def test_stationary_sample_monotone_in_depth(markov_env, markov_tables):
    prev = None
    for depth in range(0, 25, 3):
        vals, _ = sim.stationary_layers(markov_env, markov_tables, depth, 17, size=500)
        if prev is not None:
            assert np.all(vals >= prev)
        prev = vals


def test_stationary_zero_frequency_matches_pi(const_env, bern):
    b = sim.stationary_samples(const_env, bern, 1e-8, 4, 100_000)
    target = oracle.pi_zero_bernoulli_product(0.5, 0.5)
    freq = (~b.values.any(axis=1)).mean()
    assert abs(freq - target) < three_sigma(target, 100_000) + b.tail_mean_bound
    s = sim.stationary_sample(const_env, bern, 1e-8, 4)
    assert s.value.shape == (1,) and s.depth_used == b.depth_used


def test_coupled_paths_dominate_and_coalesce(markov_env, markov_tables):
    c = sim.coupled_simulate(markov_env, markov_tables, 400, 30, 5)
    assert np.all(c.Z_stationary >= c.Z)
    assert c.coalescence is not None
    assert np.array_equal(c.Z[c.coalescence:], c.Z_stationary[c.coalescence:])


def test_regenerations_partition_the_path(const_env, bern):
    t = sim.simulate(const_env, bern, 2000, 8)
    recs = sim.regenerations(t)
    nu = sim.regeneration_times(t.Z)
    assert nu[0] == 0 and np.all(t.Z[nu[1:]] == 0)
    assert sum(r.gap for r in recs) == nu[-1]
    assert all(r.segment.shape[0] == r.gap and not r.segment[-1].any() for r in recs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_paths_nonnegative_integers(seed):
    env = build_iid_env([0.3, 0.7])
    tables = one_type([F([(0, 0.6), (2, 0.4)]), F([(0, 0.8), (1, 0.2)])], [BERN, F([(0, 0.2), (3, 0.8)])])
    t = sim.simulate(env, tables, 60, seed)
    assert np.all(t.Z >= 0) and np.all(t.X >= 0)
    assert set(np.unique(t.X)) <= {0, 1, 3}


def test_decomposed_coin_modes(const_env, bern, bern_spec):
    ones = sim.decomposed_simulate(const_env, bern, bern_spec, 300, 1, coin_mode=sim.COIN_ONE)
    assert not ones.Zhat.any() and ones.xi.all()
    zeros = sim.decomposed_batch(const_env, bern, bern_spec, 1, 60_000, 2, coin_mode=sim.COIN_ZERO)
    # residual laws: immigration and offspring both put 5/6 on 1
    r = residual_law(BERN, FiniteLaw.point(0), 0.4)
    assert r.prob(1) == pytest.approx(5 / 6)
    p = (5 / 6) ** 2
    assert abs((zeros[:, 1, 0] == 1).mean() - p) < three_sigma(p, 60_000)


def test_decomposed_trace_bookkeeping(const_env, bern, bern_spec):
    tr = sim.decomposed_simulate(const_env, bern, bern_spec, 5000, 3)
    assert np.all(tr.coins_one <= tr.coins_used)
    np.testing.assert_array_equal(tr.coins_used, tr.Zhat[:-1, 0] + tr.X[:, 0])
    assert abs(tr.xi.mean() - 0.4) < 3 * np.sqrt(0.24 / 5000)


def test_decomposed_requires_domination(const_env, bern):
    spec = MinorizationSpec(0.6, (FiniteLaw.point(0),), FiniteLaw.point(0))
    with pytest.raises(DominationViolated):
        sim.decomposed_simulate(const_env, bern, spec, 10, 0)


def test_safeguard_count(const_env, bern, bern_spec):
    tr = sim.decomposed_simulate(const_env, bern, bern_spec, 20_000, 4)
    sg = sim.safeguard_count(tr, 2, 0)
    assert 0 < sg.count <= sg.eligible
    assert sg.frequency == pytest.approx(sg.count / sg.eligible)
    forced = sim.decomposed_simulate(const_env, bern, bern_spec, 200, 4, coin_mode=sim.COIN_ONE)
    assert sim.safeguard_count(forced, 3, 0).frequency == 1.0
