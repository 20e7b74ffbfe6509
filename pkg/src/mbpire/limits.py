"""Asymptotic quantities and the statistical checks built on them.

Every check returns a :class:`Check` whose verdict is tied to a named
tolerance, so reports can be traced back to the configuration that set it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np

from . import annealed, stats
from .env import EnvironmentModel, alpha_bound
from .errors import DegenerateVariance, Supercritical
from .laws import LawTables, moments
from .rng import SeedLike, derive, stream
from .sim import Trajectory, clan_batch, env_rows, regeneration_times, simulate

# floating-point floor added to 3-sigma bands whose sigma can be exactly 0
FLOAT_FLOOR = 1e-12


@dataclass
class Check:
    name: str
    passed: bool | None  # None: informational only
    tolerance: str  # name of the config tolerance that decided ``passed``
    values: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "tolerance": self.tolerance, "values": self.values}


@dataclass
class StatsReport:
    checks: list[Check] = field(default_factory=list)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.as_dict() for c in self.checks]}


# ---------------------------------------------------------------- Lyapunov


@dataclass(frozen=True)
class LyapunovEstimate:
    gamma_hat: float
    stderr: float
    n: int
    reps: int

    def gate(self, sigmas: float = stats.SIGMAS) -> bool:
        """Subcriticality accepted only when the upper band is below 0."""
        return bool(self.gamma_hat + sigmas * self.stderr < 0)


@numba.njit(cache=True, nogil=True)
def _log_norms(env, M):
    # env[r, t] is the state at time t-1; products use columns 1..n
    R, n1 = env.shape
    d = M.shape[1]
    out = np.empty(R)
    for r in range(R):
        A = np.eye(d)
        acc = 0.0
        for t in range(1, n1):
            A = M[env[r, t]] @ A
            c = 0.0
            for i in range(d):  # induced l1 norm: largest column sum
                s = 0.0
                for j in range(d):
                    s += abs(A[j, i])
                c = max(c, s)
            if c == 0.0:
                acc = -np.inf
                break
            acc += np.log(c)
            A /= c
        out[r] = acc / (n1 - 1)
    return out


def lyapunov(model: EnvironmentModel, tables: LawTables, n: int, reps: int, seed: SeedLike) -> LyapunovEstimate:
    """Mean of ``n^-1 log ||M(w_{n-1})...M(w_0)||_1`` over ``reps`` environment paths,
    renormalising the running product at every step."""
    if n < 10:
        raise ValueError("n must be >= 10")
    M = moments(tables).M
    reps = 1 if model.is_deterministic else reps
    vals = _log_norms(env_rows(model, n, reps, stream(seed, "lyapunov")), M)
    if np.isneginf(vals).any():
        return LyapunovEstimate(-math.inf, 0.0, n, reps)
    se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return LyapunovEstimate(float(vals.mean()), se, n, reps)


@numba.njit(cache=True, nogil=True)
def _kappa_logs(env, M, I, kappa):
    R, n1 = env.shape
    d = I.shape[1]
    out = np.empty(R)
    for r in range(R):
        v = I[env[r, 0]].copy()
        scale = 0.0
        for t in range(1, n1):
            v = M[env[r, t]] @ v
            c = v.sum()
            if c == 0.0:
                scale = -np.inf
                break
            scale += np.log(c)
            v /= c
        if scale == -np.inf:
            out[r] = -np.inf
        else:
            s = 0.0
            for j in range(d):
                s += v[j] ** kappa
            out[r] = kappa * scale + np.log(s) if s > 0 else -np.inf
    return out


def kappa_rate(model: EnvironmentModel, tables: LawTables, kappa: float, n: int, reps: int, seed: SeedLike) -> float:
    """Monte Carlo ``n^-1 log E ||M_{n-1,k}...M_{0,k} I_{0,k}||_k^k`` with ``k = kappa``.

    Negative values support the moment-decay condition at the tested ``n``;
    ``-inf`` means the expectation vanishes.
    """
    if kappa <= 2:
        raise ValueError("kappa must exceed 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    mom = moments(tables, kappa)
    if not np.any(mom.I_beta):
        return -math.inf
    reps = 1 if model.is_deterministic else reps
    logs = _kappa_logs(env_rows(model, n, reps, stream(seed, "kappa")), mom.M_beta, mom.I_beta, float(kappa))
    finite = logs[np.isfinite(logs)]
    if finite.size == 0:
        return -math.inf
    top = finite.max()
    return float((top + math.log(np.exp(finite - top).sum() / reps)) / n)


# ---------------------------------------------------------------- rho


@dataclass(frozen=True)
class RhoEstimate:
    value: np.ndarray
    N: int  # number of series terms summed
    tail_bound: float
    stderr: np.ndarray
    divergent: bool = False


@numba.njit(cache=True, nogil=True)
def _series_terms(env, M, I):
    # terms[r, n] = M(w_n)...M(w_0) I(w_-1) along row r
    R, n1 = env.shape
    d = I.shape[1]
    out = np.empty((R, n1 - 1, d))
    for r in range(R):
        v = I[env[r, 0]].copy()
        for t in range(1, n1):
            v = M[env[r, t]] @ v
            out[r, t - 1] = v
    return out


def rho_series(model: EnvironmentModel, tables: LawTables, delta: float, reps: int, seed: SeedLike,
               max_terms: int = 100_000, ceiling: float = 1e12) -> RhoEstimate:
    """Partial sums of ``E[M_n...M_0 I_0]`` estimated along sampled environments.

    The number of terms is the first ``N`` whose exact annealed tail is below
    ``delta``.  Without decay the partial sums are followed until they pass
    ``ceiling`` (or ``max_terms``) and the estimate is flagged divergent.
    """
    mom = moments(tables)
    d = tables.d
    if not np.any(mom.I):
        return RhoEstimate(np.zeros(d), 0, 0.0, np.zeros(d))
    op = annealed.transfer_operator(model, mom.M, mom.I)
    reps = 1 if model.is_deterministic else reps
    rng = stream(seed, "rho")
    if op.spectral_radius >= 1.0:
        N = 64
        while True:
            with np.errstate(over="ignore", invalid="ignore"):
                partial = _series_terms(env_rows(model, N, reps, rng), mom.M, mom.I).mean(axis=0).sum(axis=0)
            if N >= max_terms or not partial.sum() <= ceiling:
                break
            N = min(2 * N, max_terms)
        return RhoEstimate(np.full(d, np.inf), N, math.inf, np.full(d, np.inf), True)
    N, tail = annealed.depth_for(op, delta, max_terms)
    if N < 0:
        raise Supercritical(f"tail above {delta} after {max_terms} terms")
    N = max(N, 1)
    sums = _series_terms(env_rows(model, N, reps, rng), mom.M, mom.I).sum(axis=1)
    se = sums.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros(d)
    return RhoEstimate(sums.mean(axis=0), N, tail, se)


def rho_iid_closed_form(tables: LawTables, weights) -> np.ndarray:
    """``E M (Id - E M)^-1 E I`` for an i.i.d. environment with the given weights."""
    w = np.asarray(weights, dtype=float)
    mom = moments(tables)
    EM = np.tensordot(w, mom.M, axes=1)
    EI = w @ mom.I
    if np.max(np.abs(np.linalg.eigvals(EM))) >= 1.0:
        raise Supercritical("spectral radius of the mean matrix is >= 1")
    return EM @ np.linalg.solve(np.eye(tables.d) - EM, EI)


# ---------------------------------------------------------------- LLN / regeneration


def lln_check(traj: Trajectory, rho: RhoEstimate, sigmas: float = stats.SIGMAS, name: str = "lln") -> Check:
    """``||S_n/n - rho||_1`` against a batch-means band (plus the error carried by ``rho``)."""
    if rho.divergent or not np.all(np.isfinite(rho.value)):
        raise ValueError("rho must be finite")
    Z = traj.Z[:-1].astype(float)
    mean = Z.mean(axis=0)
    dev = float(np.abs(mean - rho.value).sum())
    mean_se = [stats.batch_means_se(Z[:, i]) for i in range(Z.shape[1])]
    band = sigmas * (sum(mean_se) + float(np.sum(rho.stderr))) + rho.tail_bound + FLOAT_FLOOR
    return Check(name, dev <= band, "sigmas", {
        "n": traj.n, "mean": mean.tolist(), "mean_se": mean_se, "rho": rho.value.tolist(),
        "deviation": dev, "band": band})


def regeneration_check(traj: Trajectory, pi_zero: float, pi_zero_error: float = 0.0,
                       sigmas: float = stats.SIGMAS, name: str = "regen") -> Check:
    """Frequency of returns to 0 against ``pi(0)``, and the mean gap against ``1/pi(0)``."""
    nu = regeneration_times(traj.Z)
    count = nu.size - 1
    n = traj.n
    freq = count / n
    se = stats.batch_means_se((~traj.Z[1:].any(axis=1)).astype(float))
    band = sigmas * se + pi_zero_error + FLOAT_FLOOR
    mean_gap = nu[-1] / count if count else math.inf
    return Check(name, abs(freq - pi_zero) <= band, "sigmas", {
        "n": n, "count": count, "frequency": freq, "frequency_se": se, "pi_zero": pi_zero, "band": band,
        "mean_gap": mean_gap, "kac_mu": 1.0 / pi_zero if pi_zero > 0 else math.inf})


# ---------------------------------------------------------------- CLT


@dataclass(frozen=True)
class CltSampleSet:
    samples: np.ndarray  # (reps, d) values of (S_n - n rho) / sqrt(n)
    n: int
    reps: int


def clt_samples(model: EnvironmentModel, tables: LawTables, rho, n: int, reps: int, seed: SeedLike,
                workers: int = 1) -> CltSampleSet:
    """Independent replicas, each with its own environment and branching streams."""
    rho = np.asarray(rho.value if isinstance(rho, RhoEstimate) else rho, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise ValueError("rho must be finite")
    if reps < 100:
        raise ValueError("reps must be >= 100")

    def one(r):
        t = simulate(model, tables, n, derive(seed, "clt", r))
        return (t.Z[:-1].sum(axis=0) - n * rho) / math.sqrt(n)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(reps)))
    else:
        out = [one(r) for r in range(reps)]
    return CltSampleSet(np.array(out), n, reps)


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma: np.ndarray
    lag_truncation: int
    stderr: np.ndarray  # per-entry standard error
    lag0: np.ndarray
    lag_terms: np.ndarray  # (lag_max, d, d): Cov(R_0, R_n) for n = 1..lag_max
    remainder_bound: float
    psd: bool
    min_eigenvalue: float


@numba.njit(cache=True, nogil=True)
def _expected_progeny(env, M, I, lags):
    """``R_n = sum_k M(w_{n+k})...M(w_n) I(w_{n-1})`` for n = 0..lags along each row.

    Uses the backward recursion ``H_n = (Id + H_{n+1}) M(w_n)`` truncated at the
    end of the row.  ``env[r, t]`` is the state at time ``t - 1``.
    """
    R, n1 = env.shape
    d = I.shape[1]
    out = np.empty((R, lags + 1, d))
    eye = np.eye(d)
    for r in range(R):
        H = np.zeros((d, d))
        for t in range(n1 - 1, 0, -1):  # time t-1 from the end down to 0
            H = (eye + H) @ M[env[r, t]]
            n = t - 1
            if n <= lags:
                out[r, n] = H @ I[env[r, t - 1]]
    return out


def covariance_remainder_bound(model: EnvironmentModel, tables: LawTables, lag_max: int,
                               max_terms: int = 200_000) -> float:
    """Bound on ``sum_{n > lag_max} |Cov(R_0, R_n)|`` (entrywise, summed over entries).

    ``R_0`` is split into the part driven by times before ``m = (n-1)//2`` and a
    remainder bounded through ``c = max_s ||M(s)||_1``; the first part and
    ``R_n`` are separated by a gap of ``n - 1 - m`` steps, where the strong
    mixing bound applies to bounded variables.
    """
    mom = moments(tables)
    c = max(np.abs(M).sum(axis=0).max() for M in mom.M)
    if c >= 1.0:
        return math.inf
    imax = float(mom.I.sum(axis=1).max())
    rmax = imax / (1.0 - c)
    d = tables.d
    total = 0.0
    for n in range(lag_max + 1, lag_max + max_terms):
        m = (n - 1) // 2
        gap = n - 1 - m
        a = alpha_bound(model, gap) if gap >= 1 else 0.25
        term = d * d * (4.0 * a * rmax**2 + 2.0 * imax * c**m / (1.0 - c) * rmax)
        total += term
        if term < 1e-18 and n > 2 * lag_max + 10:
            return total
    return math.inf


def clt_covariance(model: EnvironmentModel, tables: LawTables, lag_max: int, reps: int, seed: SeedLike,
                   delta: float = 1e-12, psd_tol: float = 1e-9) -> CovarianceEstimate:
    """Limit covariance of the normalised sums.

    The lag-0 part is the covariance of a clan's total progeny.  Clans with
    different origins are independent given the environment, so each lagged
    part reduces to an environment covariance of ``R_n = E_w(Y_n)``.
    """
    d = tables.d
    _, Y = clan_batch(model, tables, reps, derive(seed, "cov", "clans"))
    Y = Y[:, 0, :].astype(float)
    lag0 = np.atleast_2d(np.cov(Y, rowvar=False))
    Yc = Y - Y.mean(axis=0)
    se0 = np.sqrt(np.maximum(((Yc[:, :, None] * Yc[:, None, :] - lag0) ** 2).mean(axis=0), 0) / reps)

    lag_terms = np.zeros((lag_max, d, d))
    lag_se = np.zeros((lag_max, d, d))
    if not model.is_deterministic and lag_max > 0:
        mom = moments(tables)
        op = annealed.transfer_operator(model, mom.M, mom.I)
        window, _ = annealed.depth_for(op, delta, 100_000)
        rows = env_rows(model, lag_max + max(window, 1) + 1, reps, stream(seed, "cov", "env"))
        R = _expected_progeny(rows, mom.M, mom.I, lag_max)
        Rc = R - R.mean(axis=0)
        for n in range(1, lag_max + 1):
            prod = Rc[:, 0, :, None] * Rc[:, n, None, :]
            lag_terms[n - 1] = prod.sum(axis=0) / (reps - 1)
            lag_se[n - 1] = prod.std(axis=0, ddof=1) / math.sqrt(reps)
    # a constant environment has constant R_n: every lagged term is exactly 0
    sigma = lag0 + (lag_terms + lag_terms.transpose(0, 2, 1)).sum(axis=0)
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(se0**2 + (lag_se**2 + lag_se.transpose(0, 2, 1) ** 2).sum(axis=0))
    eig = float(np.linalg.eigvalsh(sigma).min())
    rem = 0.0 if model.is_deterministic else covariance_remainder_bound(model, tables, lag_max)
    return CovarianceEstimate(sigma, lag_max, se, lag0, lag_terms, rem, eig >= -psd_tol, eig)


def normality_test(samples: CltSampleSet | np.ndarray, sigma, alpha: float = stats.ALPHA,
                   tol: float = 1e-12, name: str = "normality") -> Check:
    """Per-component KS test against Normal(0, sigma_ii); pass iff every p >= alpha."""
    x = samples.samples if isinstance(samples, CltSampleSet) else np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 100:
        raise ValueError("need at least 100 samples")
    var = np.diag(np.atleast_2d(np.asarray(sigma, dtype=float)))
    stat, pval = [], []
    for i in range(x.shape[1]):
        if var[i] <= tol:
            if np.ptp(x[:, i]) > 0:
                raise DegenerateVariance(f"component {i}: variance {var[i]} but samples are not constant")
            stat.append(0.0)
            pval.append(1.0)
            continue
        s, p = stats.ks_normal(x[:, i], float(var[i]))
        stat.append(s)
        pval.append(p)
    return Check(name, all(p >= alpha for p in pval), "alpha",
                 {"ks_statistic": stat, "pvalue": pval, "variance": var.tolist(), "reps": x.shape[0]})


def variance_check(samples: CltSampleSet, target, sigmas: float = stats.SIGMAS, name: str = "clt-variance") -> Check:
    """Sample variance of each component within ``sigmas`` standard errors of ``target``."""
    x = samples.samples
    tgt = np.diag(np.atleast_2d(np.asarray(target, dtype=float)))
    var = x.var(axis=0, ddof=1)
    se = np.array([stats.variance_se(x[:, i]) for i in range(x.shape[1])])
    ok = np.abs(var - tgt) <= sigmas * se + FLOAT_FLOOR
    mean = x.mean(axis=0)
    mean_se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    ok_mean = np.abs(mean) <= sigmas * mean_se + FLOAT_FLOOR
    return Check(name, bool(ok.all() and ok_mean.all()), "sigmas", {
        "variance": var.tolist(), "target": tgt.tolist(), "variance_se": se.tolist(),
        "mean": mean.tolist(), "mean_se": mean_se.tolist()})


# ---------------------------------------------------------------- clan checks


def nondegeneracy_check(model: EnvironmentModel, tables: LawTables, i: int, reps: int, seed: SeedLike,
                        sigmas: float = stats.SIGMAS, name: str | None = None) -> Check:
    """``E_P[Var_w(Y_0^(i))]`` from pairs of clans sharing an environment.

    Given the environment the two clans are i.i.d., so half the squared
    difference is an unbiased estimate of the quenched variance.
    """
    _, Y = clan_batch(model, tables, reps, derive(seed, "nondeg"), group=2)
    diff = (Y[:, 0, i] - Y[:, 1, i]).astype(float)
    h = 0.5 * diff**2
    est = float(h.mean())
    se = float(h.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    lower = est - sigmas * se
    degenerate = not diff.any()
    return Check(name or f"nondegeneracy[{i}]", bool(lower > 0), "sigmas", {
        "statistic": est, "stderr": se, "lower": lower, "degenerate": degenerate, "reps": reps})


def survival_bounds(model: EnvironmentModel, tables: LawTables, n_max: int) -> np.ndarray:
    """``E||M_{n-1}...M_0 I_0||_1`` for n = 1..n_max, exact via the annealed transfer operator."""
    mom = moments(tables)
    op = annealed.transfer_operator(model, mom.M, mom.I)
    return annealed.mean_terms(op, n_max).sum(axis=1)


def extinction_tail_check(model: EnvironmentModel, tables: LawTables, n_max: int, reps: int, seed: SeedLike,
                          sigmas: float = stats.SIGMAS, name: str = "tail") -> Check:
    """Empirical ``P(tau_0 > n)`` against the first-moment bound for n = 1..n_max."""
    tau, _ = clan_batch(model, tables, reps, derive(seed, "tail"), cap=max(10_000, 2 * n_max))
    tau = tau[:, 0]
    alive = np.where(tau < 0, np.iinfo(np.int64).max, tau)
    ns = np.arange(1, n_max + 1)
    emp = np.array([(alive > n).mean() for n in ns])
    se = np.array([stats.binomial_se(p, reps) for p in emp])
    bound = survival_bounds(model, tables, n_max)
    ok = emp <= bound + sigmas * se + FLOAT_FLOOR
    return Check(name, bool(ok.all()), "sigmas", {
        "n": ns.tolist(), "empirical": emp.tolist(), "stderr": se.tolist(), "bound": bound.tolist(), "reps": reps})
