"""Exact simulation of the branching equation and the objects built on it.

Draw discipline (fixed, relied on by the couplings): within a time step the
immigration draw comes first, then every parent of type 0, then type 1, ...,
each parent consuming exactly one uniform (two in the decomposed simulator:
coin, then offspring).  Independent purposes use independent labelled streams
from :mod:`mbpire.rng`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import annealed
from .env import EnvironmentModel, EnvPath, _draw, chain_from, sample_backward, sample_path
from .errors import CapExceeded, DepthExceeded, InvalidTables
from .laws import LawTables, MinorizationSpec, minorant_tables, minorization_check, moments, residual_tables
from .errors import DominationViolated
from .rng import SeedLike, stream

POP_CEILING = 10**8

# status codes returned by kernels
_OK = 0
_BLOWUP = 1


@numba.njit(cache=True, nogil=True)
def _branch(out, parents, state, off_sup, off_cdf, rng):
    """Add the offspring of ``parents`` (per-type counts) to ``out``."""
    d = parents.shape[0]
    for i in range(d):
        for _ in range(parents[i]):
            k = _draw(off_cdf[state, i], rng.random())
            for j in range(d):
                out[j] += off_sup[state, i, k, j]


@numba.njit(cache=True, nogil=True)
def _forward(Z0, env, imm_sup, imm_cdf, off_sup, off_cdf, rng, Z, X, ceiling):
    R, n1 = env.shape
    d = Z0.shape[1]
    parents = np.empty(d, dtype=np.int64)
    for r in range(R):
        for j in range(d):
            Z[r, 0, j] = Z0[r, j]
        for t in range(n1 - 1):
            prev = env[r, t]
            cur = env[r, t + 1]
            k = _draw(imm_cdf[prev], rng.random())
            total = 0
            for j in range(d):
                X[r, t, j] = imm_sup[prev, k, j]
                parents[j] = Z[r, t, j] + X[r, t, j]
                total += parents[j]
                Z[r, t + 1, j] = 0
            if total > ceiling:
                return _BLOWUP
            _branch(Z[r, t + 1], parents, cur, off_sup, off_cdf, rng)
    return _OK


@numba.njit(cache=True, nogil=True)
def _forward_decomposed(env, ext_imm_sup, ext_imm_cdf, ext_off_sup, ext_off_cdf,
                        res_imm_sup, res_imm_cdf, res_off_sup, res_off_cdf,
                        eps, coin_mode, rng, Z, X, xi, coins_used, coins_one, ceiling):
    R, n1 = env.shape
    d = Z.shape[2]
    for r in range(R):
        for j in range(d):
            Z[r, 0, j] = 0
        for t in range(n1 - 1):
            prev = env[r, t]
            cur = env[r, t + 1]
            c = rng.random() < eps
            if coin_mode == 0:
                c = False
            elif coin_mode == 1:
                c = True
            xi[r, t] = c
            if c:
                k = _draw(ext_imm_cdf[prev], rng.random())
                for j in range(d):
                    X[r, t, j] = ext_imm_sup[prev, k, j]
            else:
                k = _draw(res_imm_cdf[prev], rng.random())
                for j in range(d):
                    X[r, t, j] = res_imm_sup[prev, k, j]
            total = 0
            for j in range(d):
                Z[r, t + 1, j] = 0
                total += Z[r, t, j] + X[r, t, j]
            if total > ceiling:
                return _BLOWUP
            used = 0
            ones = 0
            for i in range(d):
                for _ in range(Z[r, t, i] + X[r, t, i]):
                    lam = rng.random() < eps
                    if coin_mode == 0:
                        lam = False
                    elif coin_mode == 1:
                        lam = True
                    used += 1
                    if lam:
                        ones += 1
                        k = _draw(ext_off_cdf[cur, i], rng.random())
                        for j in range(d):
                            Z[r, t + 1, j] += ext_off_sup[cur, i, k, j]
                    else:
                        k = _draw(res_off_cdf[cur, i], rng.random())
                        for j in range(d):
                            Z[r, t + 1, j] += res_off_sup[cur, i, k, j]
            coins_used[r, t] = used
            coins_one[r, t] = ones
    return _OK


@numba.njit(cache=True, nogil=True)
def _clan(buf, filled, trans_cdf, env_rng, imm_sup, imm_cdf, off_sup, off_cdf, rng, cap, ceiling, U):
    """One clan on the environment buffer ``buf`` (``buf[0]`` = state before the origin).

    Extends ``buf`` lazily from ``env_rng``.  ``U[k]`` receives the clan's
    generation ``k``; returns ``(tau, filled)`` with ``tau = -1`` if alive after
    ``cap`` generations and ``tau = -2`` on population blow-up.
    """
    d = U.shape[1]
    k0 = _draw(imm_cdf[buf[0]], rng.random())
    alive = 0
    for j in range(d):
        U[0, j] = imm_sup[buf[0], k0, j]
    for g in range(1, cap + 1):
        while filled <= g:
            buf[filled] = _draw(trans_cdf[buf[filled - 1]], env_rng.random())
            filled += 1
        total = 0
        for j in range(d):
            U[g, j] = 0
            total += U[g - 1, j]
        if total > ceiling:
            return -2, filled
        _branch(U[g], U[g - 1], buf[g], off_sup, off_cdf, rng)
        alive = 0
        for j in range(d):
            alive += U[g, j]
        if alive == 0:
            return g, filled
    return -1, filled


@numba.njit(cache=True, nogil=True)
def _clan_batch(reps, group, init_cdf, trans_cdf, env_rng, imm_sup, imm_cdf, off_sup, off_cdf, rng, cap, ceiling, d):
    tau = np.empty((reps, group), dtype=np.int64)
    Y = np.zeros((reps, group, d), dtype=np.int64)
    buf = np.empty(cap + 2, dtype=np.int64)
    U = np.empty((cap + 1, d), dtype=np.int64)
    for r in range(reps):
        buf[0] = _draw(init_cdf, env_rng.random())
        filled = 1
        for g in range(group):
            t, filled = _clan(buf, filled, trans_cdf, env_rng, imm_sup, imm_cdf, off_sup, off_cdf, rng, cap, ceiling, U)
            tau[r, g] = t
            last = t if t > 0 else cap
            for k in range(1, last + 1):
                for j in range(d):
                    Y[r, g, j] += U[k, j]
    return tau, Y


@numba.njit(cache=True, nogil=True)
def _layer(k, back, imm_sup, imm_cdf, off_sup, off_cdf, rng, out):
    """Add the time-0 population of the clan with origin ``-k`` for each batch row.

    ``back[r, j]`` is the state at time ``-1 - j``.
    """
    R = back.shape[0]
    d = out.shape[1]
    pop = np.empty(d, dtype=np.int64)
    nxt = np.empty(d, dtype=np.int64)
    for r in range(R):
        kk = _draw(imm_cdf[back[r, k]], rng.random())
        alive = 0
        for j in range(d):
            pop[j] = imm_sup[back[r, k], kk, j]
            alive += pop[j]
        g = k - 1
        while g >= 0 and alive > 0:
            for j in range(d):
                nxt[j] = 0
            _branch(nxt, pop, back[r, g], off_sup, off_cdf, rng)
            alive = 0
            for j in range(d):
                pop[j] = nxt[j]
                alive += pop[j]
            g -= 1
        if alive > 0:
            for j in range(d):
                out[r, j] += pop[j]


@numba.njit(cache=True, nogil=True)
def _evolve_no_immigration(V0, env, off_sup, off_cdf, rng, V):
    """MBPRE without immigration: ``V[t+1]`` = offspring of ``V[t]`` in state ``env[t+1]``."""
    d = V0.shape[0]
    for j in range(d):
        V[0, j] = V0[j]
    for t in range(env.shape[0] - 1):
        for j in range(d):
            V[t + 1, j] = 0
        _branch(V[t + 1], V[t], env[t + 1], off_sup, off_cdf, rng)


def _check_pair(model: EnvironmentModel, tables: LawTables) -> None:
    if tables.n_states != model.alphabet_size:
        raise InvalidTables([f"tables cover {tables.n_states} states, environment has {model.alphabet_size}"])


@dataclass(frozen=True)
class Trajectory:
    env: EnvPath
    Z: np.ndarray  # (n+1, d)
    X: np.ndarray  # (n, d)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def S(self) -> np.ndarray:
        """``S[k] = Z_0 + ... + Z_{k-1}`` for ``k = 0..n``."""
        out = np.zeros_like(self.Z)
        np.cumsum(self.Z[:-1], axis=0, out=out[1:])
        return out


def step(Z, X, state: int, tables: LawTables, rng: np.random.Generator) -> np.ndarray:
    """One application of the branching equation: offspring of ``Z + X`` parents in ``state``."""
    ct = tables.compiled
    parents = np.asarray(Z, dtype=np.int64) + np.asarray(X, dtype=np.int64)
    out = np.zeros(ct.d, dtype=np.int64)
    _branch(out, parents, int(state), ct.off_sup, ct.off_cdf, rng)
    return out


def run_paths(env_rows: np.ndarray, tables: LawTables, rng: np.random.Generator, Z0=None):
    """Forward paths for a batch of environment rows (times -1..n-1 each)."""
    ct = tables.compiled
    R, n1 = env_rows.shape
    Z0 = np.zeros((R, ct.d), dtype=np.int64) if Z0 is None else np.asarray(Z0, dtype=np.int64).reshape(R, ct.d)
    Z = np.empty((R, n1, ct.d), dtype=np.int64)
    X = np.empty((R, n1 - 1, ct.d), dtype=np.int64)
    status = _forward(Z0, np.ascontiguousarray(env_rows), ct.imm_sup, ct.imm_cdf, ct.off_sup, ct.off_cdf,
                      rng, Z, X, POP_CEILING)
    if status != _OK:
        raise CapExceeded(f"population exceeded {POP_CEILING}; the configuration is not subcritical")
    return Z, X


def simulate(model: EnvironmentModel, tables: LawTables, n: int, seed: SeedLike) -> Trajectory:
    """Trajectory ``Z_0 = 0, ..., Z_n`` with its environment and immigration."""
    if n < 1:
        raise ValueError("horizon must be >= 1")
    _check_pair(model, tables)
    env = sample_path(model, n, seed)
    Z, X = run_paths(env.states[None, :], tables, stream(seed, "branch"))
    return Trajectory(env, Z[0], X[0])


def simulate_batch(model: EnvironmentModel, tables: LawTables, n: int, size: int, seed: SeedLike) -> np.ndarray:
    """``size`` independent paths ``Z_0..Z_n`` (shape ``(size, n+1, d)``) from one stream pair."""
    _check_pair(model, tables)
    env = env_rows(model, n, size, stream(seed, "env"))
    Z, _ = run_paths(env, tables, stream(seed, "branch"))
    return Z


def env_rows(model: EnvironmentModel, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((size, n + 1))
    rows = np.empty((size, n + 1), dtype=np.int64)
    for r in range(size):
        rows[r] = chain_from(model, _draw(model.init_cdf, u[r, 0]), n, u[r, 1:])
    return rows


@dataclass(frozen=True)
class ClanRecord:
    origin: int
    U: np.ndarray  # generations 0..last simulated
    tau: int | None  # None: still alive at the horizon
    Y: np.ndarray
    env: np.ndarray  # states at origin-1, origin, ...

    @property
    def extinct(self) -> bool:
        return self.tau is not None


def _one_clan(model, tables, origin, horizon, seed):
    _check_pair(model, tables)
    ct = tables.compiled
    env_rng = stream(seed, "env")
    rng = stream(seed, "branch")
    buf = np.empty(horizon + 2, dtype=np.int64)
    buf[0] = _draw(model.init_cdf, env_rng.random())
    U = np.empty((horizon + 1, ct.d), dtype=np.int64)
    tau, filled = _clan(buf, 1, model.transition_cdf, env_rng, ct.imm_sup, ct.imm_cdf, ct.off_sup, ct.off_cdf,
                        rng, horizon, POP_CEILING, U)
    if tau == -2:
        raise CapExceeded(f"clan population exceeded {POP_CEILING}")
    last = tau if tau > 0 else horizon
    U = U[: last + 1].copy()
    return ClanRecord(origin, U, tau if tau > 0 else None, U[1:].sum(axis=0), buf[:filled].copy())


def clan_progeny(model: EnvironmentModel, tables: LawTables, origin: int, horizon: int, seed: SeedLike) -> ClanRecord:
    """Generations ``U_{i,i}, U_{i,i+1}, ...`` of the immigrants arriving at ``origin``, up to ``horizon``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return _one_clan(model, tables, origin, horizon, seed)


def total_progeny(model: EnvironmentModel, tables: LawTables, origin: int, seed: SeedLike, cap: int = 10_000) -> ClanRecord:
    """Run a clan to extinction; ``Y`` is its total progeny over generations >= 1."""
    rec = _one_clan(model, tables, origin, cap, seed)
    if not rec.extinct:
        raise CapExceeded(f"clan still alive after {cap} generations")
    return rec


def clan_batch(model: EnvironmentModel, tables: LawTables, reps: int, seed: SeedLike,
               cap: int = 10_000, group: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Extinction times and total progenies of ``reps`` environments x ``group`` clans each.

    Clans in the same group share their environment and are otherwise
    independent.  ``tau == -1`` marks a clan alive after ``cap`` generations.
    """
    _check_pair(model, tables)
    ct = tables.compiled
    tau, Y = _clan_batch(reps, group, model.init_cdf, model.transition_cdf, stream(seed, "env"),
                         ct.imm_sup, ct.imm_cdf, ct.off_sup, ct.off_cdf, stream(seed, "branch"),
                         cap, POP_CEILING, ct.d)
    if np.any(tau == -2):
        raise CapExceeded(f"clan population exceeded {POP_CEILING}")
    return tau, Y


@dataclass(frozen=True)
class StationarySample:
    value: np.ndarray
    depth_used: int
    tail_mean_bound: float


@dataclass(frozen=True)
class StationaryBatch:
    values: np.ndarray  # (size, d)
    depth_used: int
    tail_mean_bound: float
    back_env: np.ndarray  # (size, depth+1); column j is the state at time -1-j


def stationary_depth(model: EnvironmentModel, tables: LawTables, delta: float, max_depth: int = 10_000) -> tuple[int, float]:
    mom = moments(tables)
    op = annealed.transfer_operator(model, mom.M, mom.I)
    depth, tail = annealed.depth_for(op, delta, max_depth)
    if depth < 0:
        raise DepthExceeded(f"mean tail {tail} still above {delta} at depth {max_depth}")
    return depth, tail


def stationary_layers(model: EnvironmentModel, tables: LawTables, depth: int, seed: SeedLike,
                      size: int = 1, last_env: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sum of clans with origins ``-1..-depth`` for a batch.

    Layer ``k`` (origin ``-k``) always uses the stream ``(seed, "layer", k)``
    and the backward environment is drawn column by column, so the result at
    depth ``D + 1`` equals the one at depth ``D`` plus one more clan.
    """
    _check_pair(model, tables)
    ct = tables.compiled
    if last_env is None:
        u = stream(seed, "env-last").random(size)
        last_env = np.searchsorted(model.init_cdf, u, side="right").clip(max=model.alphabet_size - 1)
    back = sample_backward(model, np.asarray(last_env, dtype=np.int64), max(depth, 0), stream(seed, "env-back"))
    out = np.zeros((back.shape[0], ct.d), dtype=np.int64)
    for k in range(1, depth + 1):
        _layer(k, back, ct.imm_sup, ct.imm_cdf, ct.off_sup, ct.off_cdf, stream(seed, "layer", k), out)
    return out, back


def stationary_samples(model: EnvironmentModel, tables: LawTables, delta: float, seed: SeedLike, size: int,
                       max_depth: int = 10_000, last_env: np.ndarray | None = None) -> StationaryBatch:
    depth, tail = stationary_depth(model, tables, delta, max_depth)
    values, back = stationary_layers(model, tables, depth, seed, size, last_env)
    return StationaryBatch(values, depth, tail, back)


def stationary_sample(model: EnvironmentModel, tables: LawTables, delta: float, seed: SeedLike,
                      max_depth: int = 10_000) -> StationarySample:
    """One draw of the stationary value at time 0, with the mean mass of omitted clans below ``delta``."""
    b = stationary_samples(model, tables, delta, seed, 1, max_depth)
    return StationarySample(b.values[0], b.depth_used, b.tail_mean_bound)


@dataclass(frozen=True)
class CoupledPaths:
    Z: np.ndarray
    Z_stationary: np.ndarray
    coalescence: int | None  # first time the pre-0 clans are extinct


def coupled_simulate(model: EnvironmentModel, tables: LawTables, n: int, depth: int, seed: SeedLike) -> CoupledPaths:
    """``Z`` and a depth-``depth`` stationary version sharing every draw made at times >= 0.

    The stationary path is ``Z`` plus the descendants ``V`` of the pre-0 clans,
    which branch from their own stream and receive no immigration.
    """
    traj = simulate(model, tables, n, seed)
    z0, _ = stationary_layers(model, tables, depth, seed, 1, np.array([traj.env.at(-1)]))
    ct = tables.compiled
    V = np.empty_like(traj.Z)
    _evolve_no_immigration(z0[0], traj.env.states, ct.off_sup, ct.off_cdf, stream(seed, "extra"), V)
    dead = np.flatnonzero(~V.any(axis=1))
    return CoupledPaths(traj.Z, traj.Z + V, int(dead[0]) if dead.size else None)


@dataclass(frozen=True, slots=True)
class RegenRecord:
    k: int
    nu_prev: int
    nu: int
    segment: np.ndarray

    @property
    def gap(self) -> int:
        return self.nu - self.nu_prev


def regeneration_times(Z: np.ndarray) -> np.ndarray:
    """``nu_0 = 0`` followed by every later time with ``Z = 0``."""
    Z = np.asarray(Z)
    if Z.ndim == 1:
        Z = Z[:, None]
    zero = ~Z[1:].any(axis=1)
    return np.concatenate(([0], np.flatnonzero(zero) + 1))


def regenerations(traj: Trajectory | np.ndarray) -> list[RegenRecord]:
    Z = traj.Z if isinstance(traj, Trajectory) else np.asarray(traj)
    if Z.ndim == 1:
        Z = Z[:, None]
    nu = regeneration_times(Z)
    return [RegenRecord(k, int(nu[k - 1]), int(nu[k]), Z[nu[k - 1] + 1: nu[k] + 1]) for k in range(1, nu.size)]


@dataclass(frozen=True)
class DecomposedTrace:
    env: EnvPath
    xi: np.ndarray  # (n,) bool
    X: np.ndarray  # (n, d) immigration actually used
    coins_used: np.ndarray  # (n,) offspring coins consumed at each time
    coins_one: np.ndarray  # (n,) of which equal to 1
    Zhat: np.ndarray  # (n+1, d)


COIN_RANDOM, COIN_ZERO, COIN_ONE = -1, 0, 1


def _decomposed_run(env_rows_, tables, spec, rng, coin_mode):
    ok, viol = minorization_check(tables, spec)
    if not ok:
        raise DominationViolated(f"minorization fails: {viol}")
    ext = minorant_tables(tables, spec).compiled
    res = residual_tables(tables, spec).compiled
    R, n1 = env_rows_.shape
    d = tables.d
    Z = np.empty((R, n1, d), dtype=np.int64)
    X = np.empty((R, n1 - 1, d), dtype=np.int64)
    xi = np.empty((R, n1 - 1), dtype=np.bool_)
    used = np.empty((R, n1 - 1), dtype=np.int64)
    ones = np.empty((R, n1 - 1), dtype=np.int64)
    status = _forward_decomposed(np.ascontiguousarray(env_rows_), ext.imm_sup, ext.imm_cdf, ext.off_sup, ext.off_cdf,
                                 res.imm_sup, res.imm_cdf, res.off_sup, res.off_cdf,
                                 spec.epsilon, coin_mode, rng, Z, X, xi, used, ones, POP_CEILING)
    if status != _OK:
        raise CapExceeded(f"population exceeded {POP_CEILING}")
    return Z, X, xi, used, ones


def decomposed_simulate(model: EnvironmentModel, tables: LawTables, spec: MinorizationSpec, n: int,
                        seed: SeedLike, coin_mode: int = COIN_RANDOM) -> DecomposedTrace:
    """Simulate through the coin construction: each immigration/offspring draw uses
    the minorant when its Bernoulli(epsilon) coin is 1 and the residual law otherwise.

    ``coin_mode`` forces every coin to 0 or 1 for the degenerate checks.
    """
    _check_pair(model, tables)
    env = sample_path(model, n, seed)
    Z, X, xi, used, ones = _decomposed_run(env.states[None, :], tables, spec, stream(seed, "branch"), coin_mode)
    return DecomposedTrace(env, xi[0], X[0], used[0], ones[0], Z[0])


def decomposed_batch(model: EnvironmentModel, tables: LawTables, spec: MinorizationSpec, n: int, size: int,
                     seed: SeedLike, coin_mode: int = COIN_RANDOM) -> np.ndarray:
    _check_pair(model, tables)
    env = env_rows(model, n, size, stream(seed, "env"))
    return _decomposed_run(env, tables, spec, stream(seed, "branch"), coin_mode)[0]


@dataclass(frozen=True)
class SafeguardCount:
    count: int
    eligible: int  # regeneration indices whose window fits in the horizon
    frequency: float  # count / eligible
    ci_halfwidth: float  # 3 sigma binomial
    per_time: float  # count / n


def safeguard_count(trace: DecomposedTrace, l0: int, R: int) -> SafeguardCount:
    """Regenerations followed by an environment-free window of ``l0`` steps.

    Window at ``nu_i``: every coin drawn at times ``nu_i .. nu_i + l0 - 1`` is 1,
    every immigration in it has l1 size at most ``R`` and the process is 0 at
    each of the next ``l0`` times.
    """
    n = trace.xi.shape[0]
    nu = regeneration_times(trace.Zhat)
    zero = ~trace.Zhat.any(axis=1)
    clean = trace.xi & (trace.coins_used == trace.coins_one) & (trace.X.sum(axis=1) <= R)
    count = 0
    eligible = 0
    for start in nu:
        if start + l0 > n:
            break
        eligible += 1
        if clean[start:start + l0].all() and zero[start + 1:start + l0 + 1].all():
            count += 1
    freq = count / eligible if eligible else 0.0
    half = 3.0 * np.sqrt(freq * (1 - freq) / eligible) if eligible else 0.0
    return SafeguardCount(count, eligible, freq, float(half), count / n)
