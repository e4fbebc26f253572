"""
Sample-quality metrics for synthetic languages.
"""

import math
from typing import Callable, Sequence

import numpy as np

from engine.errors import ContractViolation
from engine.oracle import TabularJoint


def validity_rate(samples: Sequence[Sequence[int]], checker: Callable[[Sequence[int]], bool]) -> float:
    """Fraction of samples accepted by the exact checker."""
    if len(samples) == 0:
        raise ContractViolation("validity_rate needs at least one sample")
    return sum(bool(checker(s)) for s in samples) / len(samples)


def exact_match_rate(samples: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Fraction of samples identical to their reference sequence."""
    if len(samples) == 0 or len(samples) != len(references):
        raise ContractViolation("exact_match_rate needs one reference per sample")
    hits = sum(np.array_equal(np.asarray(s), np.asarray(r)) for s, r in zip(samples, references))
    return hits / len(samples)


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def product_of_marginals_validity(joint: TabularJoint) -> float:
    """
    Probability that sampling every position independently from q's marginals
    produces a sequence in q's support.
    """
    marginals = joint.marginals()
    positions = np.arange(joint.L)
    return float(sum(np.prod(marginals[positions, seq]) for seq in joint.seqs))
