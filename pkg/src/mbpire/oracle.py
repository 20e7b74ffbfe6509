"""Exact small-instance computations used as ground truth.

Kernels live on the box {0..K}^d.  Because every quantity involved is
nonnegative, convolving truncated arrays is exact inside the box and the mass
that falls outside is accounted for as leakage.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numba
import numpy as np
import scipy.signal
import scipy.special
import scipy.stats

from . import annealed, sim
from .env import EnvironmentModel, chain_from, sample_backward
from .errors import CapTooSmall, NoConvergence, NotSingleType, ZeroMass
from .laws import FiniteLaw, LawTables, MinorizationSpec, moments, require_valid, residual_law
from .rng import SeedLike, derive, stream


def _dense(law: FiniteLaw, K: int, d: int) -> np.ndarray:
    arr = np.zeros((K + 1,) * d)
    for v, p in zip(law.support, law.probs):
        if np.all(v <= K):
            arr[tuple(v)] += p
    return arr


@numba.njit(cache=True)
def _conv1(a, b):
    n = a.shape[0]
    out = np.zeros(n)
    for i in range(n):
        if a[i] != 0.0:
            for j in range(n - i):
                out[i + j] += a[i] * b[j]
    return out


@numba.njit(cache=True)
def _conv2(a, b):
    n = a.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            x = a[i, j]
            if x != 0.0:
                for k in range(n - i):
                    for m in range(n - j):
                        out[i + k, j + m] += x * b[k, m]
    return out


def _conv(a: np.ndarray, b: np.ndarray, K: int) -> np.ndarray:
    """Convolution of two laws on the box, keeping only the part inside it."""
    if a.ndim == 1:
        return _conv1(a, b)
    if a.ndim == 2:
        return _conv2(a, b)
    out = scipy.signal.convolve(a, b, method="direct")
    return out[(slice(0, K + 1),) * a.ndim]


def _delta0(K: int, d: int) -> np.ndarray:
    a = np.zeros((K + 1,) * d)
    a[(0,) * d] = 1.0
    return a


class _Powers:
    """Truncated convolution powers of one law, built on demand."""

    def __init__(self, law: FiniteLaw, K: int, d: int):
        self.base = _dense(law, K, d)
        self.K = K
        self.cache = [_delta0(K, d)]

    def __getitem__(self, n: int) -> np.ndarray:
        while len(self.cache) <= n:
            self.cache.append(_conv(self.cache[-1], self.base, self.K))
        return self.cache[n]


@dataclass(frozen=True)
class TruncatedKernel:
    K: int
    d: int
    states: np.ndarray  # (N, d), C order over the box
    P: np.ndarray  # (N, N) substochastic
    leakage: np.ndarray  # (N,)

    def index(self, z) -> int:
        return int(np.ravel_multi_index(tuple(np.atleast_1d(z)), (self.K + 1,) * self.d))

    def row(self, z) -> np.ndarray:
        return self.P[self.index(z)].reshape((self.K + 1,) * self.d)


def box_states(K: int, d: int) -> np.ndarray:
    return np.array(list(itertools.product(range(K + 1), repeat=d)), dtype=np.int64).reshape(-1, d)


def _kernel_from(parent_law, imm: FiniteLaw, K: int, d: int, max_row_leakage: float) -> TruncatedKernel:
    """``parent_law(counts)`` gives the truncated law of all offspring of ``counts`` parents."""
    states = box_states(K, d)
    N = states.shape[0]
    P = np.zeros((N, N))
    for r, z in enumerate(states):
        row = np.zeros((K + 1,) * d)
        for x, qx in zip(imm.support, imm.probs):
            if qx > 0:
                row += qx * parent_law(tuple(int(c) for c in z + x))
        P[r] = row.ravel()
    leakage = np.clip(1.0 - P.sum(axis=1), 0.0, None)
    if leakage.max() > max_row_leakage:
        raise CapTooSmall(f"row leakage {leakage.max():.3g} exceeds {max_row_leakage} at K={K}")
    return TruncatedKernel(K, d, states, P, leakage)


def _parent_law_fn(laws: Sequence[FiniteLaw], K: int, d: int):
    powers = [_Powers(law, K, d) for law in laws]
    memo: dict[tuple, np.ndarray] = {}

    def law_of(counts):
        if counts not in memo:
            acc = powers[0][counts[0]]
            for i in range(1, d):
                acc = _conv(acc, powers[i][counts[i]], K)
            memo[counts] = acc
        return memo[counts]

    return law_of


def build_quenched_kernel(tables: LawTables, state: int, prev_state: int, K: int,
                          max_row_leakage: float = 1.0) -> TruncatedKernel:
    """One-step kernel with immigration from ``q(prev_state)`` and branching by ``p_i(state)``."""
    require_valid(tables)
    d = tables.d
    laws = [tables.p(state, i) for i in range(d)]
    return _kernel_from(_parent_law_fn(laws, K, d), tables.q(prev_state), K, d, max_row_leakage)


def build_decomposed_kernel(tables: LawTables, spec: MinorizationSpec, state: int, prev_state: int, K: int,
                            max_row_leakage: float = 1.0) -> TruncatedKernel:
    """The same one-step kernel computed through the coin construction.

    For ``N`` parents of type ``i`` the number ``j`` of coins equal to 1 is
    Binomial(N, eps); the offspring law is ``e_i^{*j} * r_i^{*(N-j)}`` summed
    over ``j``.  The immigration is mixed the same way over its single coin.
    """
    require_valid(tables)
    d, eps = tables.d, spec.epsilon
    ext = [_Powers(spec.offspring[i], K, d) for i in range(d)]
    res = [_Powers(residual_law(tables.p(state, i), spec.offspring[i], eps), K, d) for i in range(d)]
    memo: dict[tuple, np.ndarray] = {}

    def one_type(i, n):
        key = (i, n)
        if key not in memo:
            acc = np.zeros((K + 1,) * d)
            for j in range(n + 1):
                w = scipy.special.comb(n, j, exact=True) * eps**j * (1 - eps) ** (n - j)
                acc += w * _conv(ext[i][j], res[i][n - j], K)
            memo[key] = acc
        return memo[key]

    def law_of(counts):
        acc = one_type(0, counts[0])
        for i in range(1, d):
            acc = _conv(acc, one_type(i, counts[i]), K)
        return acc

    coin1 = _kernel_from(law_of, spec.immigration, K, d, 1.0)
    coin0 = _kernel_from(law_of, residual_law(tables.q(prev_state), spec.immigration, eps), K, d, 1.0)
    P = eps * coin1.P + (1 - eps) * coin0.P
    leakage = np.clip(1.0 - P.sum(axis=1), 0.0, None)
    if leakage.max() > max_row_leakage:
        raise CapTooSmall(f"row leakage {leakage.max():.3g} exceeds {max_row_leakage} at K={K}")
    return TruncatedKernel(K, d, coin1.states, P, leakage)


@dataclass(frozen=True)
class PiTable:
    K: int
    d: int
    pi: np.ndarray  # shape (K+1,)*d
    leakage_bound: float  # mass lost to truncation, 1 - pi.sum()
    error_bound: float  # pointwise bound for |pi_hat(v) - pi(v)|
    iterations: int
    stderr: np.ndarray | None = field(default=None)  # Monte Carlo error (random environments)
    mean_stderr: np.ndarray | None = field(default=None)

    @property
    def pi_zero(self) -> float:
        return float(self.pi[(0,) * self.d])

    def mean(self) -> np.ndarray:
        states = box_states(self.K, self.d)
        return self.pi.ravel() @ states


def cycle_kernels(tables: LawTables, env_cycle: Sequence[int], K: int) -> list[TruncatedKernel]:
    """Kernels for the steps of a periodic environment, starting at phase 0."""
    cyc = list(env_cycle)
    cache: dict[tuple[int, int], TruncatedKernel] = {}
    out = []
    for t in range(len(cyc)):
        pair = (cyc[t - 1], cyc[t])  # (state at t-1, state at t)
        if pair not in cache:
            cache[pair] = build_quenched_kernel(tables, pair[1], pair[0], K)
        out.append(cache[pair])
    return out


def law_after(tables: LawTables, env_cycle: Sequence[int], K: int, n: int) -> np.ndarray:
    """Exact (truncated) law of ``Z_n`` from ``Z_0 = 0`` in the periodic environment."""
    ks = cycle_kernels(tables, env_cycle, K)
    mu = np.zeros(ks[0].P.shape[0])
    mu[0] = 1.0
    for t in range(n):
        mu = mu @ ks[t % len(ks)].P
    return mu.reshape((K + 1,) * tables.d)


def stationary_pi(tables: LawTables, env_cycle: Sequence[int], K: int, tol: float = 1e-12,
                  max_iter: int = 100_000, max_leakage: float = 1e-6) -> PiTable:
    """Stationary law at phase 0 of a periodic environment.

    Iterates the cycle-composed kernel from the point mass at 0 (that is, the
    law of ``Z_n`` itself) until one full cycle changes it by less than ``tol``
    in total variation.
    """
    ks = cycle_kernels(tables, env_cycle, K)
    mu = np.zeros(ks[0].P.shape[0])
    mu[0] = 1.0
    changes = []
    for it in range(1, max_iter + 1):
        prev = mu
        for k in ks:
            mu = mu @ k.P
        changes.append(0.5 * np.abs(mu - prev).sum())
        if 1.0 - mu.sum() > max_leakage:
            raise CapTooSmall(f"truncation lost {1.0 - mu.sum():.3g} mass at K={K}")
        if changes[-1] < tol:
            break
    else:
        raise NoConvergence(f"no convergence to {tol} within {max_iter} cycles")
    mu = mu / max(1.0, mu.sum())  # rounding can push the total a few ulps above 1
    leak = float(max(0.0, 1.0 - mu.sum()))
    # remaining distance to the fixed point from the observed contraction ratio
    ratio = min(changes[-1] / changes[-2], 0.999) if len(changes) > 1 and changes[-2] > 0 else 0.5
    residual = changes[-1] * ratio / (1.0 - ratio)
    rounding = 64 * np.finfo(float).eps * it * len(ks)
    return PiTable(K, tables.d, mu.reshape((K + 1,) * tables.d), leak, leak + residual + rounding, it)


def tv(a: np.ndarray, b: np.ndarray) -> float:
    return float(0.5 * np.abs(np.ravel(a) - np.ravel(b)).sum())


def _pair_kernels(model: EnvironmentModel, tables: LawTables, K: int) -> dict[tuple[int, int], np.ndarray]:
    S = model.alphabet_size
    return {(a, b): build_quenched_kernel(tables, b, a, K).P
            for a in range(S) for b in range(S) if model.transition[a, b] > 0}


def _propagate(kernels, words: np.ndarray, K: int, d: int) -> np.ndarray:
    """Laws after running each row's word (columns: states at consecutive times) from 0."""
    n_rows, length = words.shape
    mu = np.zeros((n_rows, (K + 1) ** d))
    mu[:, 0] = 1.0
    for t in range(1, length):
        pairs = words[:, t - 1] * 1_000_003 + words[:, t]
        for key in np.unique(pairs):
            rows = pairs == key
            a, b = divmod(int(key), 1_000_003)
            mu[rows] = mu[rows] @ kernels[(a, b)]
    return mu


def quenched_pi_rows(model: EnvironmentModel, tables: LawTables, K: int, back: np.ndarray,
                     kernels=None) -> np.ndarray:
    """``pi_omega`` for each row of a backward environment (column ``j`` = time ``-1-j``).

    Clans older than the window are dropped; the caller bounds that by the
    annealed mean tail at the window depth.
    """
    kernels = kernels or _pair_kernels(model, tables, K)
    words = back[:, ::-1]  # chronological: time -depth-1 .. -1
    return _propagate(kernels, words, K, tables.d)


def stationary_pi_random(model: EnvironmentModel, tables: LawTables, K: int, words: int, seed: SeedLike,
                         delta: float = 1e-10) -> PiTable:
    """``pi = E_P[pi_omega]`` by Monte Carlo over environment words with exact per-word kernels."""
    mom = moments(tables)
    depth, tail = annealed.depth_for(annealed.transfer_operator(model, mom.M, mom.I), delta, 100_000)
    depth = max(depth, 1)
    last = np.searchsorted(model.init_cdf, stream(seed, "env-last").random(words), side="right")
    back = sample_backward(model, last.clip(max=model.alphabet_size - 1), depth, stream(seed, "env-back"))
    rows = quenched_pi_rows(model, tables, K, back)
    pi = rows.mean(axis=0)
    pi /= max(1.0, pi.sum())
    se = rows.std(axis=0, ddof=1) / math.sqrt(words) if words > 1 else np.zeros_like(pi)
    leak = float(max(0.0, 1.0 - pi.sum()))
    shape = (K + 1,) * tables.d
    means = rows @ box_states(K, tables.d).astype(float)
    mean_se = means.std(axis=0, ddof=1) / math.sqrt(words) if words > 1 else np.zeros(tables.d)
    return PiTable(K, tables.d, pi.reshape(shape), leak, leak + tail, depth, se.reshape(shape), mean_se)


def pi_zero_bernoulli_product(p: float, q: float, tol: float = 1e-12) -> float:
    """``prod_{k>=1} (1 - q p^k)``: probability that no clan of a single
    Bernoulli line is alive at time 0 (immigrant w.p. ``q``, survival ``p`` per step)."""
    if not (0 <= p < 1 and 0 <= q < 1):
        raise ValueError("p and q must lie in [0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    prod = 1.0
    k = 1
    while True:
        term = q * p**k
        prod *= 1.0 - term
        # -log of the remaining factors is at most sum_{j>k} q p^j / (1 - q p^j)
        rest = q * p ** (k + 1) / ((1.0 - p) * (1.0 - q * p ** (k + 1)))
        if rest < tol:
            return prod
        k += 1


def kac_mu(pi_zero: float) -> float:
    """Mean regeneration gap ``1 / pi(0)``."""
    if pi_zero <= 0:
        raise ZeroMass("pi(0) must be positive")
    if pi_zero > 1:
        raise ValueError("pi(0) cannot exceed 1")
    return 1.0 / pi_zero


@dataclass(frozen=True)
class GeometricFit:
    parameter: float  # success probability p in P(k) = p (1-p)^k
    statistic: float
    pvalue: float
    bins: int


def geometric_fit_kks(tables: LawTables, samples: np.ndarray, min_expected: float = 5.0) -> GeometricFit:
    """Chi-square fit of the empirical stationary law to the best geometric law on {0, 1, ...}."""
    if tables.d != 1:
        raise NotSingleType(f"geometric fit needs a single-type process, got d={tables.d}")
    x = np.asarray(samples).ravel().astype(np.int64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two samples")
    p = 1.0 / (1.0 + x.mean())
    counts = np.bincount(x)
    n = x.size
    exp_, obs = [], []
    k = 0
    # bins 0..k while the expected count stays large enough, then one tail bin
    while k < counts.size and n * p * (1 - p) ** k >= min_expected:
        exp_.append(n * p * (1 - p) ** k)
        obs.append(counts[k])
        k += 1
    exp_.append(n * (1 - p) ** k)
    obs.append(counts[k:].sum())
    if exp_[-1] < min_expected and len(exp_) > 1:
        exp_[-2] += exp_.pop()
        obs[-2] += obs.pop()
    if len(obs) < 3:
        return GeometricFit(p, 0.0, 1.0, len(obs))
    stat, pval = scipy.stats.chisquare(obs, exp_, ddof=1)
    return GeometricFit(p, float(stat), float(pval), len(obs))


@dataclass(frozen=True)
class ZeroMassResult:
    holds_some_m: bool  # P(P_omega(Z_m = 0 | Z_0 = 1) > 0) > 0
    holds_one_step: bool  # P(P_omega(Z_1 = 0 | Z_0 = 1) > 0) = 1
    witness: tuple[int, ...] | None  # a word (states at -1..m-1) realising the first
    blocking: tuple[int, int] | None  # a state pair with zero one-step probability


def _words(model: EnvironmentModel, length: int):
    S = model.alphabet_size
    for w in itertools.product(range(S), repeat=length):
        p = model.init[w[0]]
        for a, b in zip(w, w[1:]):
            p *= model.transition[a, b]
        if p > 0:
            yield w


def zero_mass_criterion(tables: LawTables, model: EnvironmentModel, m: int, K: int) -> ZeroMassResult:
    """Exact check, over all environment words of positive probability, of whether
    the all-ones population can die out in ``m`` steps (and in one step for every word).

    Truncation only removes paths, so a positive value is certified; a zero
    with leakage along the way is undecidable and raises ``CapTooSmall``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if K < 1:
        raise CapTooSmall("the box must contain the all-ones vector")
    d = tables.d
    kernels = _pair_kernels(model, tables, K)
    ones = np.ravel_multi_index((1,) * d, (K + 1,) * d)

    def zero_prob(word):
        mu = np.zeros((K + 1) ** d)
        mu[ones] = 1.0
        for a, b in zip(word, word[1:]):
            mu = mu @ kernels[(a, b)]
        return mu[0], 1.0 - mu.sum()

    witness, undecided = None, False
    for w in _words(model, m + 1):
        p0, leak = zero_prob(w)
        if p0 > 0:
            witness = w
            break
        undecided |= leak > 0
    if witness is None and undecided:
        raise CapTooSmall(f"extinction probability is zero on the box K={K} but mass leaked")
    blocking = None
    for w in _words(model, 2):
        p0, _ = zero_prob(w)  # one step from the all-ones state never leaves through 0
        if p0 <= 0:
            blocking = w
            break
    return ZeroMassResult(witness is not None, blocking is None, witness, blocking)


@dataclass(frozen=True)
class PalmCheck:
    palm: float  # P(pattern | stationary value at 0 is 0)
    palm_se: float
    weighted: float  # importance-weighted fresh-start estimate
    weighted_se: float
    pi_zero: float
    zero_weight_fraction: float  # share of environments with pi_omega(0) = 0
    conditioned: int
    passed: bool


def _pattern_hits(Z: np.ndarray, pattern: Mapping[int, Sequence[int]]) -> np.ndarray:
    hit = np.ones(Z.shape[0], dtype=bool)
    for t, v in pattern.items():
        hit &= np.all(Z[:, t] == np.asarray(v), axis=1)
    return hit


def palm_identity_check(model: EnvironmentModel, tables: LawTables, pattern: Mapping[int, Sequence[int]],
                        K: int, size: int, seed: SeedLike, delta: float = 1e-9, sigmas: float = 3.0) -> PalmCheck:
    """Compare the path law seen from a zero of the stationary process with the
    fresh-start law reweighted by ``pi_omega(0) / pi(0)``.

    ``pattern`` maps times ``t >= 1`` to required population vectors.
    """
    horizon = max(pattern)
    if min(pattern) < 1:
        raise ValueError("pattern times must be >= 1")
    depth, _ = sim.stationary_depth(model, tables, delta)
    depth = max(depth, 1)

    def environments(tag):
        last = np.searchsorted(model.init_cdf, stream(seed, tag, "last").random(size), side="right")
        last = last.clip(max=model.alphabet_size - 1)
        fwd = np.empty((size, horizon + 1), dtype=np.int64)
        u = stream(seed, tag, "fwd").random((size, horizon))
        for r in range(size):
            fwd[r] = chain_from(model, int(last[r]), horizon, u[r])
        return last, fwd

    # left side: stationary start, keep the rows that start at 0
    last, fwd = environments("palm")
    z0, _ = sim.stationary_layers(model, tables, depth, derive(seed, "palm", "layers"),
                                  size, last)
    Z, _ = sim.run_paths(fwd, tables, stream(seed, "palm", "branch"), z0)
    keep = ~z0.any(axis=1)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ZeroMass("no stationary sample started at 0")
    hits = _pattern_hits(Z[keep], pattern)
    palm = hits.mean()
    palm_se = math.sqrt(max(palm * (1 - palm), 1e-300) / n_keep)

    # right side: fresh starts weighted by the quenched zero mass
    last, fwd = environments("fresh")
    if model.is_deterministic:
        w = np.ones(size)  # pi_omega(0) does not depend on a constant environment
    else:
        back = sample_backward(model, last, depth, stream(seed, "fresh", "back"))
        w = quenched_pi_rows(model, tables, K, back)[:, 0]
    if w.sum() <= 0:
        raise ZeroMass("pi(0) estimate is zero")
    Z, _ = sim.run_paths(fwd, tables, stream(seed, "fresh", "branch"))
    h = _pattern_hits(Z, pattern).astype(float)
    weighted = float((w * h).sum() / w.sum())
    # delta-method error of the self-normalised estimator
    resid = w * (h - weighted)
    weighted_se = float(math.sqrt(max((resid**2).sum(), 1e-300)) / w.sum())
    joint = math.sqrt(palm_se**2 + weighted_se**2)
    return PalmCheck(float(palm), palm_se, weighted, weighted_se, float(w.mean()), float((w <= 0).mean()),
                     n_keep, abs(palm - weighted) <= sigmas * joint)


def pattern_probability(tables: LawTables, env_cycle: Sequence[int], K: int,
                        pattern: Mapping[int, Sequence[int]], start: np.ndarray | None = None) -> float:
    """Exact probability of ``{Z_t = v_t for all t in pattern}`` in a periodic
    environment, started from ``start`` (default: the point mass at 0)."""
    ks = cycle_kernels(tables, env_cycle, K)
    shape = (K + 1,) * tables.d
    mu = np.zeros(ks[0].P.shape[0])
    if start is None:
        mu[0] = 1.0
    else:
        mu[:] = np.ravel(start)
    for t in range(1, max(pattern) + 1):
        mu = mu @ ks[(t - 1) % len(ks)].P
        if t in pattern:
            keep = np.ravel_multi_index(tuple(np.atleast_1d(pattern[t])), shape)
            val = mu[keep]
            mu = np.zeros_like(mu)
            mu[keep] = val
    return float(mu.sum())
