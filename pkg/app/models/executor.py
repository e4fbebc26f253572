"""
TinyARExecutor: a small causal transformer that decodes one block from a prompt.

Input layout is [prompt (B + 2 rows), E(y_1), ..., E(y_j)]; the output at
prompt row B + 1 (the closing boundary) predicts y_1 and every later output
predicts the next block token. Positions are block-local, the executor never
sees other blocks.
"""

from typing import Any, Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.models.conditioning import block_prompt
from app.models.denoiser import encoder_stack
from engine.diffusion import Vocabulary
from engine.errors import ContractViolation
from engine.interfaces import BlockDecoding, BlockRequest, restrict_to_support, sample_token


class TinyARExecutor(nn.Module):
    def __init__(self, vocab: Vocabulary, max_block: int = 8, d_model: int = 64, n_layers: int = 2,
                 n_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.vocab = vocab
        self.max_block = max_block
        self.hparams: Dict[str, Any] = {
            "max_block": max_block, "d_model": d_model, "n_layers": n_layers, "n_heads": n_heads,
            "dropout": dropout,
        }
        self.embedding = nn.Embedding(vocab.size, d_model)
        self.pos = nn.Embedding(2 * max_block + 2, d_model)
        self.decoder = encoder_stack(d_model, n_heads, n_layers, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab.size)

    @property
    def E(self) -> torch.Tensor:
        return self.embedding.weight

    def prompt(self, pi, conditioning: str = "soft") -> torch.Tensor:
        return block_prompt(pi, self.E, self.vocab, conditioning)

    def forward(self, prompt: torch.Tensor, tokens: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Next-token logits, shape (N, j + 1, |V|), for prompt (N, B + 2, d) and
        already decoded block tokens (N, j).
        """
        B = prompt.shape[-2] - 2
        if B < 1 or B > self.max_block:
            raise ContractViolation(f"Block size {B} outside 1..{self.max_block}")
        rows = prompt
        if tokens is not None and tokens.shape[-1] > 0:
            rows = torch.cat([prompt, self.embedding(tokens)], dim=-2)
        n = rows.shape[-2]
        h = rows + self.pos(torch.arange(n, device=rows.device))
        causal = nn.Transformer.generate_square_subsequent_mask(n, device=rows.device, dtype=rows.dtype)
        h = self.decoder(h, mask=causal, is_causal=True)
        logits = self.head(self.norm(h[..., B + 1:, :]))
        return logits.index_fill(-1, torch.tensor([self.vocab.mask_id], device=logits.device), float("-inf"))

    def teacher_forced_logprobs(self, prompt: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """log p(y_j | prompt, y_<j) for every target, shape (N, B)."""
        logits = self.forward(prompt, targets[..., :-1])
        return torch.gather(F.log_softmax(logits, dim=-1), -1, targets.unsqueeze(-1)).squeeze(-1)


class NeuralExecutor:
    """Adapts a TinyARExecutor to the block executor interface."""

    def __init__(self, model: TinyARExecutor):
        self.model = model
        self.vocab = model.vocab

    @torch.no_grad()
    def decode(self, request: BlockRequest, rng: np.random.Generator, greedy: bool = False,
               temperature: float = 1.0, top_p: float = 1.0) -> BlockDecoding:
        self.model.eval()
        E = self.model.E
        prompt = self.model.prompt(torch.as_tensor(request.marginals, dtype=E.dtype), request.conditioning)
        decoded = [int(t) for t in request.prefix]
        truncated = request.support.truncated_marginals() if request.support is not None else None
        tokens, dists = [], []
        for step in range(request.remaining):
            tokens_in = torch.tensor([decoded], dtype=torch.long)
            logits = self.model(prompt.unsqueeze(0), tokens_in)[0, -1]
            dist = F.softmax(logits.double(), dim=-1).cpu().numpy()
            dist[self.vocab.mask_id] = 0.0
            dist /= dist.sum()
            if request.support is not None:
                dist = restrict_to_support(dist, request.support.sets[step], truncated[step])
            tok = sample_token(dist, rng, greedy=greedy, temperature=temperature, top_p=top_p)
            tokens.append(tok)
            dists.append(dist)
            decoded.append(tok)
        return BlockDecoding(tokens=tokens, dists=np.array(dists).reshape(len(dists), self.vocab.size))
