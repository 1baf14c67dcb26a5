"""Bimatrix Nash equilibria: support enumeration with a fictitious-play fallback."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class NashResult:
    row: np.ndarray  # row player's mixture (attacker)
    col: np.ndarray  # column player's mixture (defender)
    row_value: float
    col_value: float
    gap: float  # certified max unilateral pure deviation gain
    method: str


def deviation_gap(A: np.ndarray, B: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Largest gain either player gets from a pure deviation."""
    ay, xb = A @ y, x @ B
    return float(max(ay.max() - x @ ay, xb.max() - xb @ y, 0.0))


def _indifference(M: np.ndarray) -> np.ndarray | None:
    """Mixture ``p`` with ``M p`` constant and ``sum p = 1`` (exact solutions only)."""
    k, l = M.shape
    lhs = np.zeros((k + 1, l + 1))
    lhs[:k, :l] = M
    lhs[:k, l] = -1.0
    lhs[k, :l] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if np.abs(lhs @ sol - rhs).max() > 1e-10:
        return None
    return sol[:l]


def support_enumeration(
    A: np.ndarray, B: np.ndarray, tol: float = 1e-10, max_pairs: int = 200_000
) -> tuple[np.ndarray, np.ndarray] | None:
    """First equilibrium found scanning support pairs, smallest total size first.

    Equal-size supports come first within each total size; unequal sizes are
    tried too so degenerate games are covered.
    """
    m, n = A.shape
    sizes = sorted(((k, l) for k in range(1, m + 1) for l in range(1, n + 1)),
                   key=lambda kl: (kl[0] + kl[1], kl[0] != kl[1], kl))
    tried = 0
    for k, l in sizes:
        for I in itertools.combinations(range(m), k):
            for J in itertools.combinations(range(n), l):
                tried += 1
                if tried > max_pairs:
                    return None
                y_s = _indifference(A[np.ix_(I, J)])
                if y_s is None or np.any(y_s < -tol):
                    continue
                x_s = _indifference(B[np.ix_(I, J)].T)
                if x_s is None or np.any(x_s < -tol):
                    continue
                x, y = np.zeros(m), np.zeros(n)
                x[list(I)] = np.clip(x_s, 0, None)
                y[list(J)] = np.clip(y_s, 0, None)
                x /= x.sum()
                y /= y.sum()
                if deviation_gap(A, B, x, y) <= 1e-9 * max(1.0, np.abs(A).max(), np.abs(B).max()):
                    return x, y
    return None


def fictitious_play(A: np.ndarray, B: np.ndarray, iters: int = 20_000) -> tuple[np.ndarray, np.ndarray]:
    m, n = A.shape
    cx, cy = np.zeros(m), np.zeros(n)
    cx[0] = cy[0] = 1.0
    for _ in range(iters):
        cx[np.argmax(A @ (cy / cy.sum()))] += 1.0
        cy[np.argmax((cx / cx.sum()) @ B)] += 1.0
    return cx / cx.sum(), cy / cy.sum()


def solve_nash(A, B, max_support_size: int = 12) -> NashResult:
    """Equilibrium of the bimatrix game (A: row payoffs, B: column payoffs)."""
    A, B = np.atleast_2d(np.asarray(A, dtype=float)), np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape or A.size == 0:
        raise ValueError("payoff matrices must be non-empty and of equal shape")
    found = None
    if max(A.shape) <= max_support_size:
        found = support_enumeration(A, B)
    method = "support-enumeration"
    if found is None:
        log.info("support enumeration gave up on a %sx%s game; using fictitious play", *A.shape)
        found = fictitious_play(A, B)
        method = "fictitious-play"
    x, y = found
    return NashResult(x, y, float(x @ A @ y), float(x @ B @ y), deviation_gap(A, B, x, y), method)
