"""Exact annealed means of products of mean matrices.

For a finite-alphabet environment the vector ``E_P[M(w_n)...M(w_0) I(w_-1)]``
is obtained by propagating state-indexed blocks
``a_t(s) = E[M(w_{t-1})...M(w_0) I(w_-1); w_{t-1} = s]`` with the linear map
``a_t(s') = M(s') sum_s P(s, s') a_{t-1}(s)``.  All quantities are nonnegative,
so l1 norms of expectations equal expectations of l1 norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvironmentModel


@dataclass(frozen=True)
class TransferOperator:
    matrix: np.ndarray  # (S*d, S*d)
    start: np.ndarray  # (S*d,)
    n_states: int
    d: int

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.matrix))))

    def collapse(self, blocks: np.ndarray) -> np.ndarray:
        return blocks.reshape(self.n_states, self.d).sum(axis=0)


def transfer_operator(model: EnvironmentModel, M: np.ndarray, I: np.ndarray) -> TransferOperator:
    S, d = I.shape
    if S != model.alphabet_size:
        raise ValueError("moment arrays and environment disagree on the alphabet size")
    big = np.zeros((S * d, S * d))
    for sp in range(S):
        for s in range(S):
            big[sp * d:(sp + 1) * d, s * d:(s + 1) * d] = model.transition[s, sp] * M[sp]
    start = (model.init[:, None] * I).ravel()
    return TransferOperator(big, start, S, d)


def mean_terms(op: TransferOperator, count: int) -> np.ndarray:
    """Rows ``n = 0..count-1`` of ``E[M_n ... M_0 I_0]``."""
    out = np.empty((count, op.d))
    a = op.start
    for n in range(count):
        a = op.matrix @ a
        out[n] = op.collapse(a)
    return out


def mean_tail(op: TransferOperator, start_index: int) -> float:
    """``sum_{n >= start_index} ||E[M_n ... M_0 I_0]||_1``; ``inf`` when the series diverges."""
    if not np.any(op.start):
        return 0.0
    if op.spectral_radius >= 1.0:
        return float("inf")
    eye = np.eye(op.matrix.shape[0])
    b = np.linalg.solve(eye - op.matrix, op.start)
    # sum_{t >= start_index + 1} A^t a0 = A^(start_index + 1) (I - A)^(-1) a0
    b = np.linalg.matrix_power(op.matrix, start_index + 1) @ b
    return float(max(0.0, b.sum()))


def exact_rho(op: TransferOperator) -> np.ndarray:
    """``sum_{n >= 0} E[M_n ... M_0 I_0]``, or a vector of ``inf`` if divergent."""
    if not np.any(op.start):
        return np.zeros(op.d)
    if op.spectral_radius >= 1.0:
        return np.full(op.d, np.inf)
    eye = np.eye(op.matrix.shape[0])
    return op.collapse(op.matrix @ np.linalg.solve(eye - op.matrix, op.start))


def depth_for(op: TransferOperator, delta: float, max_depth: int) -> tuple[int, float]:
    """Smallest depth ``D`` whose omitted-clan mean mass is below ``delta``.

    Clan with origin ``-k`` contributes ``E||M_{k-1}...M_0 I_0||_1`` to the mean
    of the stationary value, so clans beyond depth ``D`` carry the mean tail
    starting at series index ``D``.  Returns ``(D, tail)``; ``D = -1`` if
    ``max_depth`` is insufficient.
    """
    if not np.any(op.start):
        return 0, 0.0
    if op.spectral_radius >= 1.0:
        return -1, float("inf")
    eye = np.eye(op.matrix.shape[0])
    b = op.matrix @ np.linalg.solve(eye - op.matrix, op.start)
    for depth in range(max_depth + 1):
        tail = float(max(0.0, b.sum()))
        if tail < delta:
            return depth, tail
        b = op.matrix @ b
    return -1, tail
