"""
Soft conditioning of the block executor on denoiser marginals.

The executor sees a block as [E(<think>), e^1, ..., e^B, E(</think>)] where
e^j = sum_v pi^j[v] E(v). Works on any leading batch shape.
"""

from typing import Optional, Union

import numpy as np
import torch

from engine.diffusion import Vocabulary
from engine.errors import ContractViolation

ArrayLike = Union[np.ndarray, torch.Tensor]

SUM_TOL = 1e-6


def _as_tensor(pi: ArrayLike, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(pi, dtype=like.dtype, device=like.device)


def soft_embed(pi: ArrayLike, E: torch.Tensor) -> torch.Tensor:
    """Expected embedding rows under each marginal, shape (..., B, d)."""
    pi = _as_tensor(pi, E)
    if pi.shape[-1] != E.shape[0]:
        raise ContractViolation(f"Marginals cover {pi.shape[-1]} tokens, embedding matrix has {E.shape[0]} rows")
    sums = pi.sum(dim=-1)
    if torch.any((sums - 1.0).abs() > SUM_TOL):
        raise ContractViolation("Each marginal must sum to 1")
    return pi @ E


def _frame(rows: torch.Tensor, E: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    lead = rows.shape[:-2]
    bot = E[vocab.bot_id].expand(*lead, 1, E.shape[1])
    eot = E[vocab.eot_id].expand(*lead, 1, E.shape[1])
    return torch.cat([bot, rows, eot], dim=-2)


def build_block_prompt(
    soft: torch.Tensor, E: torch.Tensor, vocab: Vocabulary, pi: Optional[ArrayLike] = None
) -> torch.Tensor:
    """
    Frame soft rows with the boundary embeddings, length B + 2.

    When pi is given, rows whose most likely token is EOS are replaced by the
    hard EOS embedding.
    """
    if pi is not None:
        pi = _as_tensor(pi, E)
        is_eos = (pi.argmax(dim=-1) == vocab.eos_id).unsqueeze(-1)
        soft = torch.where(is_eos, E[vocab.eos_id].expand_as(soft), soft)
    return _frame(soft, E, vocab)


def hard_condition_prompt(pi: ArrayLike, E: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """Top-1 ablation: each row is the embedding of argmax pi (lowest index on ties)."""
    pi = _as_tensor(pi, E)
    return _frame(E[pi.argmax(dim=-1)], E, vocab)


def block_prompt(pi: ArrayLike, E: torch.Tensor, vocab: Vocabulary, conditioning: str = "soft") -> torch.Tensor:
    if conditioning == "soft":
        return build_block_prompt(soft_embed(pi, E), E, vocab, pi)
    if conditioning == "top1":
        return hard_condition_prompt(pi, E, vocab)
    raise ContractViolation(f"Unknown conditioning {conditioning!r}")
