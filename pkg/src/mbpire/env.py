"""Stationary ergodic environments over a finite alphabet.

An environment is either an i.i.d. sequence with a fixed weight vector or a
stationary finite Markov chain.  Paths are stored from time -1 onwards since
the immigration law at time 0 is selected by the state at time -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import EmptyAlphabet, NonStochastic, NotErgodic
from .rng import SeedLike, stream

STOCHASTIC_ATOL = 1e-12
STATIONARY_ATOL = 1e-10


def _check_probability_vector(p: np.ndarray, what: str) -> None:
    if p.size == 0:
        raise EmptyAlphabet(f"{what} has no states")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NonStochastic(f"{what} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > STOCHASTIC_ATOL:
        raise NonStochastic(f"{what} sums to {p.sum()!r}, not 1")


def _cdf_rows(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


def is_primitive(transition: np.ndarray) -> bool:
    """True iff some power of the transition matrix is strictly positive."""
    k = transition.shape[0]
    a = (transition > 0).astype(np.int64)
    power = a.copy()
    # Wielandt: a primitive k x k matrix has A^((k-1)^2 + 1) > 0
    for _ in range((k - 1) ** 2 + 1):
        if np.all(power > 0):
            return True
        power = np.minimum(power @ a, 1)
    return bool(np.all(power > 0))


@dataclass(frozen=True)
class EnvironmentModel:
    """Immutable environment law.

    ``transition`` is always populated; for the i.i.d. kind every row equals
    ``init`` so that samplers can treat both kinds uniformly.
    """

    kind: str
    init: np.ndarray
    transition: np.ndarray
    init_cdf: np.ndarray = field(repr=False, compare=False)
    transition_cdf: np.ndarray = field(repr=False, compare=False)

    @property
    def alphabet_size(self) -> int:
        return int(self.init.shape[0])

    @property
    def is_deterministic(self) -> bool:
        return self.alphabet_size == 1

    @property
    def weights(self) -> np.ndarray:
        return self.init

    def reversed_transition(self) -> np.ndarray:
        """Transition matrix of the time-reversed stationary chain."""
        pi = self.init
        return (self.transition.T * pi[None, :]) / pi[:, None]

    def __eq__(self, other):
        if not isinstance(other, EnvironmentModel):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.init, other.init)
            and np.array_equal(self.transition, other.transition)
        )

    def __hash__(self):
        return hash((self.kind, self.init.tobytes(), self.transition.tobytes()))


def build_iid_env(weights) -> EnvironmentModel:
    w = np.asarray(weights, dtype=float).ravel()
    _check_probability_vector(w, "weights")
    w = w.copy()
    w.setflags(write=False)
    trans = np.tile(w, (w.size, 1))
    trans.setflags(write=False)
    return EnvironmentModel("iid", w, trans, _cdf_rows(w), _cdf_rows(trans))


def stationary_vector(transition: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law of an ergodic chain by power iteration."""
    k = transition.shape[0]
    pi = np.full(k, 1.0 / k)
    for _ in range(max_iter):
        nxt = pi @ transition
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise NotErgodic("power iteration for the stationary vector did not converge")


def build_markov_env(transition) -> EnvironmentModel:
    p = np.asarray(transition, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise NonStochastic("transition matrix must be square")
    if p.shape[0] == 0:
        raise EmptyAlphabet("transition matrix has no states")
    for i, row in enumerate(p):
        _check_probability_vector(row, f"transition row {i}")
    if not is_primitive(p):
        raise NotErgodic("transition matrix is reducible or periodic")
    pi = stationary_vector(p)
    if np.abs(pi @ p - pi).max() > STATIONARY_ATOL:
        raise NotErgodic("stationary vector failed the invariance check")
    p = p.copy()
    p.setflags(write=False)
    pi.setflags(write=False)
    return EnvironmentModel("markov", pi, p, _cdf_rows(pi), _cdf_rows(p))


@dataclass(frozen=True)
class EnvPath:
    """States of the environment at times -1, 0, ..., n-1."""

    states: np.ndarray

    def __post_init__(self):
        if self.states.ndim != 1 or self.states.size < 1:
            raise ValueError("an environment path holds at least the state at time -1")

    @property
    def n(self) -> int:
        return self.states.size - 1

    def at(self, t: int) -> int:
        """State at time ``t`` (``t >= -1``)."""
        if t < -1:
            raise IndexError(t)
        return int(self.states[t + 1])


@numba.njit(cache=True, nogil=True)
def _draw(cdf, u):
    k = 0
    last = cdf.shape[0] - 1
    while k < last and u >= cdf[k]:
        k += 1
    return k


@numba.njit(cache=True, nogil=True)
def _chain(first, u, transition_cdf, out):
    # out[0] is given; out[t] drawn from row out[t-1] using u[t-1]
    out[0] = first
    for t in range(1, out.shape[0]):
        out[t] = _draw(transition_cdf[out[t - 1]], u[t - 1])


def chain_from(model: EnvironmentModel, first: int, steps: int, u: np.ndarray) -> np.ndarray:
    """Forward continuation of length ``steps`` after ``first`` (included)."""
    out = np.empty(steps + 1, dtype=np.int64)
    _chain(first, u, model.transition_cdf, out)
    return out


def sample_path(model: EnvironmentModel, n: int, seed: SeedLike) -> EnvPath:
    """Stationary environment path at times -1..n-1, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(seed, "env")
    u = rng.random(n + 1)
    first = _draw(model.init_cdf, u[0])
    return EnvPath(chain_from(model, first, n, u[1:]))


def sample_backward(model: EnvironmentModel, last: np.ndarray, depth: int, rng: np.random.Generator) -> np.ndarray:
    """Environment before time -1 for a batch, layer by layer.

    ``last`` holds the states at time -1 (one per batch member).  Column ``j``
    of the result is the state at time ``-1 - j``; columns are drawn in order
    of increasing depth, so extending ``depth`` never changes earlier columns.
    """
    rev_cdf = _cdf_rows(model.reversed_transition())
    size = last.shape[0]
    out = np.empty((size, depth + 1), dtype=np.int64)
    out[:, 0] = last
    for j in range(1, depth + 1):
        u = rng.random(size)
        out[:, j] = _step_batch(out[:, j - 1].copy(), u, rev_cdf)
    return out


@numba.njit(cache=True, nogil=True)
def _step_batch(prev, u, cdf):
    res = np.empty_like(prev)
    for r in range(prev.shape[0]):
        res[r] = _draw(cdf[prev[r]], u[r])
    return res


def n_step_tv(model: EnvironmentModel, m: int) -> np.ndarray:
    """Total-variation distance of the ``m``-step law from each start to stationarity."""
    pm = np.linalg.matrix_power(model.transition, m)
    return 0.5 * np.abs(pm - model.init[None, :]).sum(axis=1)


def second_eigenvalue_modulus(model: EnvironmentModel) -> float:
    if model.alphabet_size == 1 or model.kind == "iid":
        return 0.0
    ev = np.sort(np.abs(np.linalg.eigvals(model.transition)))[::-1]
    return float(ev[1])


def alpha_bound(model: EnvironmentModel, n: int) -> float:
    """Certified upper bound on the strong mixing coefficient at gap ``n``.

    The past ends at time -1 and the future starts at time n, so the Markov
    property reduces the coefficient to the ``n + 1``-step kernel:
    ``alpha(n) <= sum_i pi_i * TV(P^(n+1)(i, .), pi)``.  Zero for i.i.d.
    environments; decays like ``|lambda_2|^n`` for Markov ones.
    """
    if n < 1:
        raise ValueError("gap must be >= 1")
    if model.kind == "iid":
        return 0.0
    return float(max(0.0, model.init @ n_step_tv(model, n + 1)))


def phi_bound(model: EnvironmentModel, n: int) -> float:
    """Certified upper bound on the uniform mixing coefficient at gap ``n``:
    ``phi(n) <= max_i TV(P^(n+1)(i, .), pi)``."""
    if n < 1:
        raise ValueError("gap must be >= 1")
    if model.kind == "iid":
        return 0.0
    return float(max(0.0, n_step_tv(model, n + 1).max()))
