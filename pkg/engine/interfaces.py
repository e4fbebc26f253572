"""
The two model roles used by the decoder and the sampling helpers they share.

- MarginalPredictor: token-factorized denoiser, x_t -> per-position marginals
- BlockExecutor: decodes one block autoregressively from a block request
"""

from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from engine.diffusion import BlockPartition, Vocabulary
from engine.errors import ContractViolation
from engine.oracle import FrechetSupport, ranked_tokens

DIST_TOL = 1e-6

DEFAULT_TEMPERATURE = 0.1
DEFAULT_TOP_P = 0.8


@runtime_checkable
class MarginalPredictor(Protocol):
    vocab: Vocabulary

    def predict(self, x_t: np.ndarray) -> np.ndarray:
        """Per-position distributions, shape (L, |V|); unmasked rows are point masses."""
        ...


@dataclass
class BlockRequest:
    """Everything an executor may look at when decoding one block."""
    x_t: np.ndarray
    part: BlockPartition
    block: int
    marginals: np.ndarray
    prefix: Sequence[int] = ()
    conditioning: str = "soft"
    support: Optional[FrechetSupport] = None

    @property
    def remaining(self) -> int:
        return self.part.B - len(self.prefix)


@dataclass
class BlockDecoding:
    """Tokens emitted for the masked suffix of a block and the distribution at each step."""
    tokens: List[int]
    dists: np.ndarray
    calls: int = 1
    notes: List[str] = field(default_factory=list)


@runtime_checkable
class BlockExecutor(Protocol):
    vocab: Vocabulary

    def decode(
        self,
        request: BlockRequest,
        rng: np.random.Generator,
        greedy: bool = False,
        temperature: float = DEFAULT_TEMPERATURE,
        top_p: float = DEFAULT_TOP_P,
    ) -> BlockDecoding:
        ...


# ============================================================================
# Sampling helpers
# ============================================================================

def check_distribution(dist: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != vocab.size:
        raise ContractViolation(f"Distribution has {dist.shape[-1]} entries, vocabulary has {vocab.size}")
    if np.any(dist < -DIST_TOL) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > DIST_TOL):
        raise ContractViolation("Distribution must be nonnegative and sum to 1")
    if np.any(dist[..., vocab.mask_id] > 0):
        raise ContractViolation("MASK must have zero probability")
    return dist


def sample_token(
    dist: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
    temperature: float = 1.0,
    top_p: float = 1.0,
) -> int:
    """
    Draw one token from a categorical.

    greedy takes the most likely token (lowest index on ties). Otherwise the
    distribution is tempered, cut to the smallest nucleus with mass >= top_p
    and sampled. Tokens with zero mass are never drawn.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if greedy:
        return ranked_tokens(dist)[0]
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    support = np.flatnonzero(dist > 0)
    logits = np.log(dist[support]) / temperature
    weights = np.exp(logits - logits.max())
    weights /= weights.sum()
    if top_p < 1.0:
        order = np.lexsort((support, -weights))
        cumulative = np.cumsum(weights[order])
        cutoff = int(np.searchsorted(cumulative, top_p - 1e-12)) + 1
        keep = np.zeros_like(weights, dtype=bool)
        keep[order[:cutoff]] = True
        weights = np.where(keep, weights, 0.0)
        weights /= weights.sum()
    return int(support[rng.choice(len(support), p=weights)])


def restrict_to_support(dist: np.ndarray, allowed: Sequence[int], fallback: np.ndarray) -> np.ndarray:
    """
    Renormalize dist over the allowed tokens.

    When the allowed tokens carry no mass the fallback distribution is used.
    """
    idx = list(allowed)
    out = np.zeros_like(dist, dtype=np.float64)
    out[idx] = dist[idx]
    mass = out.sum()
    if mass <= 0.0:
        return np.asarray(fallback, dtype=np.float64).copy()
    return out / mass
