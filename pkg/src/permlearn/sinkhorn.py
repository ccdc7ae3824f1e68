"""Differentiable Sinkhorn normalization.

Forward alternates row and column normalization of a strictly positive
matrix; backward propagates gradients through every unrolled step in reverse.
All functions accept a single ``(l, l)`` matrix or a stack ``(..., l, l)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class SinkhornConfig:
    iterations: int = 5
    epsilon: float = 1e-3
    clamp: float = 50.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.clamp > 0:
            raise ValueError("clamp must be positive")


@dataclass
class TapeCache:
    """Intermediates of one forward unroll: ``(pre_row, post_row, post_col)`` per iteration."""

    steps: list = field(default_factory=list)
    shape: tuple = ()

    def __len__(self):
        return len(self.steps)


def _check_square(q):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim < 2 or q.shape[-1] != q.shape[-2]:
        raise ShapeError(f"expected square matrices, got shape {q.shape}")
    return q


def to_positive(scores, cfg: SinkhornConfig):
    """``exp(clip(scores, -clamp, clamp)) + epsilon``; every entry is at least ``epsilon``."""
    scores = _check_square(scores)
    return np.exp(np.clip(scores, -cfg.clamp, cfg.clamp)) + cfg.epsilon


def to_positive_backward(grad_out, scores, cfg: SinkhornConfig):
    scores = np.asarray(scores, dtype=np.float64)
    inside = np.abs(scores) < cfg.clamp
    return np.where(inside, grad_out * np.exp(np.clip(scores, -cfg.clamp, cfg.clamp)), 0.0)


def row_normalize(q):
    q = _check_square(q)
    sums = q.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise DomainError("row normalization needs every row sum to be positive")
    return q / sums


def col_normalize(q):
    q = _check_square(q)
    sums = q.sum(axis=-2, keepdims=True)
    if np.any(sums <= 0):
        raise DomainError("column normalization needs every column sum to be positive")
    return q / sums


def row_normalize_backward(grad_out, q_in):
    """Gradient w.r.t. the input of :func:`row_normalize`.

    ``dL/dQ[p,q] = sum_j G[p,j] * (1{j=q} / s_p - Q[p,j] / s_p**2)`` with ``s_p`` the row sum.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    q_in = np.asarray(q_in, dtype=np.float64)
    if grad_out.shape != q_in.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match input shape {q_in.shape}")
    s = q_in.sum(axis=-1, keepdims=True)
    inner = (grad_out * q_in).sum(axis=-1, keepdims=True)
    return grad_out / s - inner / (s * s)


def col_normalize_backward(grad_out, q_in):
    swap = lambda a: np.swapaxes(a, -1, -2)  # noqa: E731
    return swap(row_normalize_backward(swap(np.asarray(grad_out)), swap(np.asarray(q_in))))


def sinkhorn_forward(q0, cfg: SinkhornConfig):
    """Run ``cfg.iterations`` rounds of ``C(R(.))`` on ``q0``; returns the result and its tape."""
    q = _check_square(q0)
    if not np.all(q > 0):
        raise DomainError("Sinkhorn input must be strictly positive")
    tape = TapeCache(shape=q.shape)
    for _ in range(cfg.iterations):
        r = row_normalize(q)
        c = col_normalize(r)
        tape.steps.append((q, r, c))
        q = c
    return q, tape


def sinkhorn_backward(grad_out, tape: TapeCache):
    grad = np.asarray(grad_out, dtype=np.float64)
    if grad.shape != tuple(tape.shape):
        raise ShapeError(f"gradient shape {grad.shape} does not match tape shape {tape.shape}")
    for pre_row, post_row, _ in reversed(tape.steps):
        grad = col_normalize_backward(grad, post_row)
        grad = row_normalize_backward(grad, pre_row)
    return grad


def sinkhorn_converge(q0, tol: float = 1e-6, max_iterations: int = 100):
    """Inference-only Sinkhorn: iterate until the normalization error is at most ``tol``.

    Returns the matrix and the number of iterations performed (capped at ``max_iterations``).
    """
    q = _check_square(q0)
    if not np.all(q > 0):
        raise DomainError("Sinkhorn input must be strictly positive")
    n = 0
    while n < max_iterations:
        q = col_normalize(row_normalize(q))
        n += 1
        err = (np.abs(q.sum(axis=-1) - 1).mean(axis=-1) + np.abs(q.sum(axis=-2) - 1).mean(axis=-1)) / 2
        if np.max(err) <= tol:
            break
    return q, n
