"""Rounding a doubly-stochastic matrix to its nearest permutation matrix.

For a permutation matrix ``P`` we have ``||P||_F^2 = l``, so

    ||P - Q||_F^2 = l + ||Q||_F^2 - 2 <P, Q>

and the nearest permutation is the maximum-weight assignment on ``Q``.  Both
solvers below score a candidate through :func:`assignment_gain` so that equal
gains always give bit-identical objectives.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .permcore import Permutation

BRUTE_FORCE_MAX_L = 9


@dataclass(frozen=True)
class AssignmentResult:
    perm: Permutation
    objective: float


def _as_matrix(q) -> np.ndarray:
    q = getattr(q, "q", q)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DomainError("matrix contains non-finite entries")
    return q


def assignment_gain(q: np.ndarray, pi) -> float:
    """``sum_i q[i, pi[i]]`` accumulated left to right."""
    total = 0.0
    for i, j in enumerate(pi):
        total += q[i, j]
    return total


def frobenius_objective(q: np.ndarray, pi) -> float:
    l = q.shape[0]
    sq = l + float(np.sum(q * q)) - 2.0 * assignment_gain(q, pi)
    return math.sqrt(max(sq, 0.0))


def hungarian(cost: np.ndarray):
    """Minimum-cost assignment on a square cost matrix.

    Shortest augmenting path with potentials, O(n^3).  Returns ``(assignment,
    u, v)`` where ``assignment[i]`` is the column of row ``i`` and ``u``/``v``
    are optimal duals: ``cost[i, j] - u[i] - v[j] >= 0`` with equality on the
    chosen edges.
    """
    n = cost.shape[0]
    inf = math.inf
    # 1-based arrays; column 0 is a virtual source
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j
    way = [0] * (n + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            row = c[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    return assignment, np.array(u[1:]), np.array(v[1:])


def _max_assignment(q: np.ndarray) -> np.ndarray:
    return hungarian(-q)[0]


def round_to_permutation(q) -> AssignmentResult:
    """Nearest permutation matrix to ``q`` in Frobenius norm.

    Among optimal assignments the lexicographically smallest ``pi`` is
    returned: the Hungarian solution is refined row by row, only trying
    columns whose reduced cost is (numerically) zero, since no other edge
    can appear in an optimal assignment.
    """
    q = _as_matrix(q)
    l = q.shape[0]
    best, u, v = hungarian(-q)
    best_gain = assignment_gain(q, best)
    reduced = -q - u[:, None] - v[None, :]
    slack_tol = 1e-9 * max(1.0, float(np.abs(q).max()))

    pi = best.copy()
    for i in range(l):
        fixed = set(pi[:i].tolist())
        for j in range(pi[i]):
            if j in fixed or reduced[i, j] > slack_tol:
                continue
            rows = list(range(i + 1, l))
            cols = [k for k in range(l) if k not in fixed and k != j]
            cand = pi.copy()
            cand[i] = j
            if rows:
                sub = _max_assignment(q[np.ix_(rows, cols)])
                cand[i + 1:] = np.asarray(cols)[sub]
            if assignment_gain(q, cand) >= best_gain:
                pi = cand
                best_gain = assignment_gain(q, cand)
                break
    return AssignmentResult(Permutation(pi), frobenius_objective(q, pi))


def brute_force_round(q) -> AssignmentResult:
    """Exhaustive nearest-permutation search; ties go to the lexicographically smallest ``pi``."""
    q = _as_matrix(q)
    l = q.shape[0]
    if l > BRUTE_FORCE_MAX_L:
        raise ValueError(f"brute force rounding is limited to l <= {BRUTE_FORCE_MAX_L}, got {l}")
    best_pi = None
    best_gain = -math.inf
    # itertools yields permutations in lexicographic order; strict '>' keeps the first optimum
    for pi in itertools.permutations(range(l)):
        g = assignment_gain(q, pi)
        if g > best_gain:
            best_gain = g
            best_pi = pi
    return AssignmentResult(Permutation(best_pi), frobenius_objective(q, best_pi))
