"""Permutations, shuffling/recovery of sequences, and evaluation metrics.

Convention used throughout the package: a permutation ``pi`` maps shuffled
positions to original indices, ``shuffled[i] = ordered[pi[i]]``.  Its matrix
view has ``P[i, pi[i]] = 1`` so that, stacking items as rows,
``shuffled = P @ ordered`` and ``ordered = P.T @ shuffled``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True, eq=False)
class Permutation:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pi, dtype=np.int64).reshape(-1)
        l = pi.size
        if l == 0:
            raise ShapeError("permutation must have at least one element")
        seen = np.zeros(l, dtype=bool)
        if pi.min() < 0 or pi.max() >= l:
            raise DomainError(f"entries of pi must lie in [0, {l}), got {pi.tolist()}")
        seen[pi] = True
        if not seen.all():
            raise DomainError(f"pi is not a bijection: {pi.tolist()}")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def l(self) -> int:
        return int(self.pi.size)

    @classmethod
    def identity(cls, l: int) -> "Permutation":
        return cls(np.arange(l))

    @classmethod
    def from_matrix(cls, m) -> "Permutation":
        m = np.asarray(m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"expected a square matrix, got shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise DomainError("permutation matrix must be binary")
        if not (np.all(m.sum(axis=0) == 1) and np.all(m.sum(axis=1) == 1)):
            raise DomainError("permutation matrix needs exactly one 1 per row and column")
        return cls(np.argmax(m, axis=1))

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.l, self.l))
        m[np.arange(self.l), self.pi] = 1.0
        return m

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.pi)
        inv[self.pi] = np.arange(self.l)
        return Permutation(inv)

    def reversed_targets(self) -> "Permutation":
        """Permutation whose recovered ordering is the reverse of this one's."""
        return Permutation(self.l - 1 - self.pi)

    def __eq__(self, other):
        if not isinstance(other, Permutation):
            return NotImplemented
        return self.l == other.l and bool(np.array_equal(self.pi, other.pi))

    def __hash__(self):
        return hash(tuple(self.pi.tolist()))

    def __repr__(self):
        return f"Permutation({self.pi.tolist()})"


@dataclass
class DoublyStochasticMatrix:
    """Square non-negative matrix whose rows and columns sum to one within ``tol``."""

    q: np.ndarray
    tol: float = 1e-3

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ShapeError(f"expected a square matrix, got shape {q.shape}")
        if np.any(q < 0):
            raise DomainError("doubly-stochastic matrix has a negative entry")
        self.q = q
        err = max(np.abs(q.sum(axis=0) - 1).max(), np.abs(q.sum(axis=1) - 1).max())
        if err > self.tol:
            raise DomainError(f"row/column sums deviate from 1 by {err:.3g} > tol {self.tol:g}")

    @property
    def l(self) -> int:
        return self.q.shape[0]


@dataclass
class SequenceSample:
    """An ordered sequence, the permutation used to shuffle it, and optionally its latent criterion."""

    items: np.ndarray
    perm: Permutation
    criterion_value: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.items) != self.perm.l:
            raise ShapeError(f"{len(self.items)} items but permutation of length {self.perm.l}")
        if self.criterion_value is not None:
            c = np.asarray(self.criterion_value, dtype=np.float64)
            if c.shape != (self.perm.l,):
                raise ShapeError("criterion_value must hold one value per item")
            if np.any(np.diff(c) <= 0):
                raise DomainError("criterion_value must be strictly increasing in the ordered view")

    def shuffled(self):
        return apply(self.perm, self.items)


def sample_permutation(l: int, rng: np.random.Generator) -> Permutation:
    """Uniform random permutation of length ``l`` (Fisher-Yates via ``rng.permutation``)."""
    if l < 2:
        raise ValueError(f"permutation length must be at least 2, got {l}")
    return Permutation(rng.permutation(l))


def _check_len(perm: Permutation, seq):
    if len(seq) != perm.l:
        raise ShapeError(f"sequence of length {len(seq)} does not match permutation length {perm.l}")


def apply(perm: Permutation, seq):
    """Shuffle ``seq`` so that ``out[i] = seq[pi[i]]``.

    Arrays are gathered along their first axis; any other sequence comes back as a list.
    """
    _check_len(perm, seq)
    if isinstance(seq, np.ndarray):
        return seq[perm.pi]
    return [seq[j] for j in perm.pi]


def recover(perm: Permutation, shuffled):
    """Undo :func:`apply`: ``out[pi[i]] = shuffled[i]``."""
    _check_len(perm, shuffled)
    if isinstance(shuffled, np.ndarray):
        out = np.empty_like(shuffled)
        out[perm.pi] = shuffled
        return out
    out = [None] * perm.l
    for i, j in enumerate(perm.pi):
        out[j] = shuffled[i]
    return out


def _check_pair(pred: Permutation, truth: Permutation):
    if pred.l != truth.l:
        raise ShapeError(f"permutation lengths differ: {pred.l} vs {truth.l}")


def kendall_tau(pred: Permutation, truth: Permutation) -> float:
    """Kendall tau between the ordering recovered with ``pred`` and the true ordering.

    A pair of shuffled positions ``(a, b)`` is concordant when ``pred`` and
    ``truth`` place them in the same relative order.  This equals counting
    pairs in ``truth.pi[pred.inverse().pi]`` against the identity.
    """
    _check_pair(pred, truth)
    l = pred.l
    if l < 2:
        return 1.0
    p = pred.pi
    t = truth.pi
    iu, ju = np.triu_indices(l, k=1)
    agree = np.sign(p[iu] - p[ju]) * np.sign(t[iu] - t[ju])
    concordant = int(np.count_nonzero(agree > 0))
    discordant = int(np.count_nonzero(agree < 0))
    return (concordant - discordant) / (l * (l - 1) / 2)


def hamming_similarity(pred: Permutation, truth: Permutation) -> float:
    """Fraction of equal entries between the two permutation matrices."""
    _check_pair(pred, truth)
    l = pred.l
    mismatched_rows = int(np.count_nonzero(pred.pi != truth.pi))
    # each mismatched row differs in exactly two entries
    return (l * l - 2 * mismatched_rows) / (l * l)


def normalization_error(q) -> float:
    """Mean absolute deviation from one over all ``2l`` row and column sums."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {q.shape}")
    if np.any(q < 0):
        raise DomainError("normalization error is defined for non-negative matrices only")
    dev = np.concatenate([np.abs(q.sum(axis=1) - 1), np.abs(q.sum(axis=0) - 1)])
    return float(dev.mean())
