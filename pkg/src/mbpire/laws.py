"""Finite-support offspring and immigration laws and their moment objects.

Matrix orientation: ``M[s][j, i]`` is the mean number of type-``j`` children
of one type-``i`` parent in state ``s``, so the conditional mean of the next
generation is ``M(s) @ (Z + X)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DominationViolated, InvalidMinorization, InvalidTables

PROB_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteLaw:
    """Probability law on Z_+^d with finite support (not validated on construction)."""

    support: np.ndarray  # (K, d) integer
    probs: np.ndarray  # (K,)

    def __post_init__(self):
        sup = np.asarray(self.support)
        if sup.ndim == 1:
            sup = sup[:, None]
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float).ravel())

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Sequence[int] | int, float]]) -> "FiniteLaw":
        pairs = list(pairs)
        sup = [np.atleast_1d(v) for v, _ in pairs]
        return cls(np.array(sup), np.array([p for _, p in pairs], dtype=float))

    @classmethod
    def from_dict(cls, mapping: Mapping[tuple, float]) -> "FiniteLaw":
        return cls.from_pairs(mapping.items())

    @classmethod
    def point(cls, v: Sequence[int] | int) -> "FiniteLaw":
        return cls(np.array([np.atleast_1d(v)]), np.array([1.0]))

    @property
    def dim(self) -> int:
        return int(self.support.shape[1])

    def as_dict(self) -> dict[tuple[int, ...], float]:
        out: dict[tuple[int, ...], float] = {}
        for v, p in zip(self.support, self.probs):
            key = tuple(int(x) for x in v)
            out[key] = out.get(key, 0.0) + float(p)
        return out

    def prob(self, v) -> float:
        return self.as_dict().get(tuple(int(x) for x in np.atleast_1d(v)), 0.0)

    def issues(self, where: str = "law") -> list["Issue"]:
        found = []
        sup, p = self.support, self.probs
        if sup.shape[0] == 0 or sup.shape[0] != p.shape[0]:
            return [Issue("Malformed", where, "support and probabilities differ in length or are empty")]
        if not np.issubdtype(sup.dtype, np.integer):
            if not np.all(np.isfinite(sup)) or np.any(sup != np.round(sup)):
                found.append(Issue("NonInteger", where, "support vectors must be integer"))
        if np.any(sup < 0):
            found.append(Issue("NegativeSupport", where, "support vectors must be componentwise >= 0"))
        if len({tuple(v) for v in sup.tolist()}) != sup.shape[0]:
            found.append(Issue("DuplicateSupport", where, "support vectors must be distinct"))
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            found.append(Issue("NegativeProb", where, "probabilities must be finite and >= 0"))
        elif abs(p.sum() - 1.0) > PROB_ATOL:
            found.append(Issue("NonStochastic", where, f"probabilities sum to {p.sum()!r}"))
        return found

    def mean(self) -> np.ndarray:
        return self.probs @ self.support.astype(float)

    def norm_beta(self, beta: float) -> np.ndarray:
        """Per-coordinate (E |X_j|^beta)^(1/beta)."""
        s = self.support.astype(float)
        return (self.probs @ s**beta) ** (1.0 / beta)


@dataclass(frozen=True)
class Issue:
    code: str
    where: str
    detail: str

    def __str__(self):
        return f"{self.code} at {self.where}: {self.detail}"


@dataclass(frozen=True, eq=False)
class LawTables:
    """Offspring law ``p_i(s)`` keyed by ``(s, i)`` and immigration law ``q(s)`` keyed by ``s``."""

    d: int
    n_states: int
    offspring: Mapping[tuple[int, int], FiniteLaw]
    immigration: Mapping[int, FiniteLaw]

    @classmethod
    def from_lists(cls, offspring: Sequence[Sequence[FiniteLaw]], immigration: Sequence[FiniteLaw]) -> "LawTables":
        """``offspring[s][i]`` and ``immigration[s]``; ``d`` is read off the laws."""
        d = immigration[0].dim
        off = {(s, i): law for s, row in enumerate(offspring) for i, law in enumerate(row)}
        return cls(d, len(immigration), off, dict(enumerate(immigration)))

    def p(self, s: int, i: int) -> FiniteLaw:
        return self.offspring[(s, i)]

    def q(self, s: int) -> FiniteLaw:
        return self.immigration[s]

    @cached_property
    def compiled(self) -> "CompiledTables":
        require_valid(self)
        return CompiledTables.build(self)


def validate_tables(tables: LawTables) -> list[Issue]:
    """Every violated invariant; an empty list means the tables are valid."""
    issues: list[Issue] = []
    for s in range(tables.n_states):
        law = tables.immigration.get(s)
        if law is None:
            issues.append(Issue("MissingLaw", f"immigration[state {s}]", "no law given"))
        else:
            issues.extend(law.issues(f"immigration[state {s}]"))
            if law.support.shape[0] and law.dim != tables.d:
                issues.append(Issue("DimensionMismatch", f"immigration[state {s}]", f"vectors must have {tables.d} components"))
        for i in range(tables.d):
            law = tables.offspring.get((s, i))
            where = f"offspring[state {s}, type {i}]"
            if law is None:
                issues.append(Issue("MissingLaw", where, "no law given"))
                continue
            issues.extend(law.issues(where))
            if law.support.shape[0] and law.dim != tables.d:
                issues.append(Issue("DimensionMismatch", where, f"vectors must have {tables.d} components"))
    return issues


def require_valid(tables: LawTables) -> None:
    issues = validate_tables(tables)
    if issues:
        raise InvalidTables(issues)


@dataclass(frozen=True)
class MomentData:
    beta: float
    M: np.ndarray  # (S, d, d)
    I: np.ndarray  # (S, d)
    M_beta: np.ndarray
    I_beta: np.ndarray


def _moment_objects(tables: LawTables, beta: float) -> tuple[np.ndarray, np.ndarray]:
    S, d = tables.n_states, tables.d
    M = np.empty((S, d, d))
    I = np.empty((S, d))
    for s in range(S):
        I[s] = tables.q(s).norm_beta(beta)
        for i in range(d):
            M[s, :, i] = tables.p(s, i).norm_beta(beta)
    return M, I


def moments(tables: LawTables, beta: float = 1.0) -> MomentData:
    if beta < 1:
        raise ValueError("beta must be >= 1")
    require_valid(tables)
    M, I = _moment_objects(tables, 1.0)
    Mb, Ib = _moment_objects(tables, float(beta))
    return MomentData(float(beta), M, I, Mb, Ib)


@dataclass(frozen=True)
class MinorizationSpec:
    """Environment-free minorants: ``offspring[i]`` for each type, then the immigration minorant."""

    epsilon: float
    offspring: tuple[FiniteLaw, ...]
    immigration: FiniteLaw

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidMinorization(f"epsilon must lie in (0, 1), got {self.epsilon}")
        object.__setattr__(self, "offspring", tuple(self.offspring))
        for k, law in enumerate((*self.offspring, self.immigration)):
            bad = law.issues(f"minorant {k + 1}")
            if bad:
                raise InvalidMinorization("; ".join(map(str, bad)))
        for i, law in enumerate(self.offspring):
            if law.prob(np.zeros(law.dim, dtype=int)) <= 0.0:
                raise InvalidMinorization(f"offspring minorant {i + 1} puts no mass on the zero vector")

    @property
    def d(self) -> int:
        return len(self.offspring)


@dataclass(frozen=True)
class Violation:
    state: int
    law: str
    point: tuple[int, ...]
    have: float
    need: float


def _first_violation(law: FiniteLaw, minorant: FiniteLaw, eps: float) -> tuple | None:
    have = law.as_dict()
    for v, e in minorant.as_dict().items():
        if e > 0 and have.get(v, 0.0) < eps * e:
            return v, have.get(v, 0.0), eps * e
    return None


def minorization_check(tables: LawTables, spec: MinorizationSpec) -> tuple[bool, Violation | None]:
    """Pointwise domination ``p >= eps * e`` (non-strict) for every state, type and point."""
    require_valid(tables)
    if spec.d != tables.d:
        raise InvalidMinorization("minorization spec has the wrong number of types")
    eps = spec.epsilon
    for s in range(tables.n_states):
        for i in range(tables.d):
            hit = _first_violation(tables.p(s, i), spec.offspring[i], eps)
            if hit:
                return False, Violation(s, f"offspring type {i}", *hit)
        hit = _first_violation(tables.q(s), spec.immigration, eps)
        if hit:
            return False, Violation(s, "immigration", *hit)
    return True, None


def residual_law(law: FiniteLaw, minorant: FiniteLaw, epsilon: float) -> FiniteLaw:
    """``(law - epsilon * minorant) / (1 - epsilon)``."""
    if not 0.0 < epsilon < 1.0:
        raise InvalidMinorization("epsilon must lie in (0, 1)")
    a, b = law.as_dict(), minorant.as_dict()
    points = sorted(set(a) | set(b))
    out = []
    for v in points:
        r = a.get(v, 0.0) - epsilon * b.get(v, 0.0)
        if r < -PROB_ATOL:
            raise DominationViolated(f"law puts {a.get(v, 0.0)} < {epsilon} * {b.get(v, 0.0)} at {v}")
        if r > 0:
            out.append((v, r / (1.0 - epsilon)))
    return FiniteLaw.from_pairs(out)


def mixture(first: FiniteLaw, second: FiniteLaw, weight: float) -> FiniteLaw:
    """``weight * first + (1 - weight) * second``."""
    a, b = first.as_dict(), second.as_dict()
    return FiniteLaw.from_pairs(
        (v, weight * a.get(v, 0.0) + (1.0 - weight) * b.get(v, 0.0)) for v in sorted(set(a) | set(b))
    )


def residual_tables(tables: LawTables, spec: MinorizationSpec) -> LawTables:
    off = {(s, i): residual_law(tables.p(s, i), spec.offspring[i], spec.epsilon)
           for s in range(tables.n_states) for i in range(tables.d)}
    imm = {s: residual_law(tables.q(s), spec.immigration, spec.epsilon) for s in range(tables.n_states)}
    return LawTables(tables.d, tables.n_states, off, imm)


def minorant_tables(tables: LawTables, spec: MinorizationSpec) -> LawTables:
    """The external (environment-free) process laid out as one table per state."""
    off = {(s, i): spec.offspring[i] for s in range(tables.n_states) for i in range(tables.d)}
    imm = {s: spec.immigration for s in range(tables.n_states)}
    return LawTables(tables.d, tables.n_states, off, imm)


@dataclass(frozen=True)
class CompiledTables:
    """Padded arrays for the jitted samplers; cumulative probabilities per law."""

    d: int
    n_states: int
    off_sup: np.ndarray  # (S, d, K, d) int64
    off_cdf: np.ndarray  # (S, d, K)
    imm_sup: np.ndarray  # (S, K, d)
    imm_cdf: np.ndarray  # (S, K)

    @classmethod
    def build(cls, tables: LawTables) -> "CompiledTables":
        S, d = tables.n_states, tables.d
        k_max = max(law.support.shape[0] for law in (*tables.offspring.values(), *tables.immigration.values()))
        off_sup = np.zeros((S, d, k_max, d), dtype=np.int64)
        off_cdf = np.ones((S, d, k_max))
        imm_sup = np.zeros((S, k_max, d), dtype=np.int64)
        imm_cdf = np.ones((S, k_max))

        def fill(law, sup_out, cdf_out):
            k = law.support.shape[0]
            sup_out[:k] = law.support
            # padding repeats the last point with cdf 1 so it is never selected
            sup_out[k:] = law.support[-1]
            c = np.cumsum(law.probs)
            c[-1] = 1.0
            cdf_out[:k] = c

        for s in range(S):
            fill(tables.q(s), imm_sup[s], imm_cdf[s])
            for i in range(d):
                fill(tables.p(s, i), off_sup[s, i], off_cdf[s, i])
        return cls(d, S, off_sup, off_cdf, imm_sup, imm_cdf)
