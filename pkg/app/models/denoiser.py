"""
TinyDenoiser: a small bidirectional transformer producing per-position marginals.
"""

from typing import Any, Dict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from engine.diffusion import Vocabulary, check_token_seq


def encoder_stack(d_model: int, n_heads: int, n_layers: int, dropout: float) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=d_model,
        nhead=n_heads,
        dim_feedforward=4 * d_model,
        dropout=dropout,
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=n_layers, enable_nested_tensor=False)


class TinyDenoiser(nn.Module):
    """
    Token + position embeddings, full attention, per-position readout over V.

    MASK and the boundary tokens never receive probability. marginals() copies
    unmasked positions through as point masses on the observed token.
    """

    def __init__(self, vocab: Vocabulary, L: int, d_model: int = 64, n_layers: int = 2, n_heads: int = 4,
                 dropout: float = 0.0):
        super().__init__()
        self.vocab = vocab
        self.L = L
        self.hparams: Dict[str, Any] = {
            "L": L, "d_model": d_model, "n_layers": n_layers, "n_heads": n_heads, "dropout": dropout,
        }
        self.tok = nn.Embedding(vocab.size, d_model)
        self.pos = nn.Embedding(L, d_model)
        self.encoder = encoder_stack(d_model, n_heads, n_layers, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.readout = nn.Linear(d_model, vocab.size)
        forbidden = torch.zeros(vocab.size, dtype=torch.bool)
        forbidden[list(vocab.forbidden_output_ids)] = True
        self.register_buffer("forbidden", forbidden, persistent=False)

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:
        """Logits of shape (N, L, |V|)."""
        positions = torch.arange(x_t.shape[-1], device=x_t.device)
        h = self.encoder(self.tok(x_t) + self.pos(positions))
        logits = self.readout(self.norm(h))
        return logits.masked_fill(self.forbidden, float("-inf"))

    def marginals(self, x_t: torch.Tensor) -> torch.Tensor:
        probs = F.softmax(self.forward(x_t), dim=-1)
        observed = (x_t != self.vocab.mask_id).unsqueeze(-1)
        return torch.where(observed, F.one_hot(x_t, self.vocab.size).to(probs.dtype), probs)


class NeuralPredictor:
    """Adapts a TinyDenoiser to the numpy predictor interface used by the decoder."""

    def __init__(self, model: TinyDenoiser):
        self.model = model
        self.vocab = model.vocab

    @torch.no_grad()
    def predict(self, x_t: np.ndarray) -> np.ndarray:
        x_t = check_token_seq(x_t, self.vocab)
        self.model.eval()
        probs = self.model.marginals(torch.as_tensor(x_t, dtype=torch.long).unsqueeze(0))[0]
        out = probs.double().cpu().numpy()
        out[:, self.vocab.mask_id] = 0.0
        return out / out.sum(axis=-1, keepdims=True)
