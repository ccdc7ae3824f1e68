"""Learning to predict the permutation that shuffled an ordered sequence.

A Siamese network scores every (shuffled position, original index) pair,
Sinkhorn normalization turns the scores into a doubly-stochastic matrix, and
a linear assignment rounds that matrix to the nearest permutation.
"""
from .assign import AssignmentResult, brute_force_round, round_to_permutation
from .errors import DivergenceError, DomainError, FormatError, ShapeError
from .permcore import (
    DoublyStochasticMatrix,
    Permutation,
    SequenceSample,
    apply,
    hamming_similarity,
    kendall_tau,
    normalization_error,
    recover,
    sample_permutation,
)
from .sinkhorn import SinkhornConfig, sinkhorn_backward, sinkhorn_forward

__version__ = "0.1.0"

__all__ = [
    "AssignmentResult",
    "DivergenceError",
    "DomainError",
    "DoublyStochasticMatrix",
    "FormatError",
    "Permutation",
    "SequenceSample",
    "ShapeError",
    "SinkhornConfig",
    "apply",
    "brute_force_round",
    "hamming_similarity",
    "kendall_tau",
    "normalization_error",
    "recover",
    "round_to_permutation",
    "sample_permutation",
    "sinkhorn_backward",
    "sinkhorn_forward",
]
