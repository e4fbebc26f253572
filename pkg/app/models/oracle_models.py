"""
Exact and baseline model roles backed by a TabularJoint.

- OraclePredictor: exact conditional marginals q(x_0^i | x_t)
- OracleExecutor: exact block conditionals decoded left to right
- MarginalExecutor: samples every block position independently from its
  marginal (token-independent parallel sampling behind the executor interface)
"""

import logging
from typing import List

import numpy as np

from engine.diffusion import Vocabulary, check_token_seq
from engine.interfaces import BlockDecoding, BlockRequest, restrict_to_support, sample_token
from engine.errors import UnreachableEvidence
from engine.oracle import TabularJoint, block_conditional, conditional_marginal

log = logging.getLogger(__name__)


class OraclePredictor:
    """Token-factorized predictor that returns the joint's exact conditional marginals."""

    def __init__(self, joint: TabularJoint):
        self.joint = joint
        self.vocab: Vocabulary = joint.vocab

    def predict(self, x_t: np.ndarray) -> np.ndarray:
        x_t = check_token_seq(x_t, self.vocab)
        out = np.zeros((x_t.size, self.vocab.size))
        for pos, tok in enumerate(x_t):
            if tok == self.vocab.mask_id:
                out[pos] = conditional_marginal(self.joint, x_t, pos)
            else:
                out[pos, tok] = 1.0
        return out


class OracleExecutor:
    """Decodes a block from the exact chain rule of the joint given x_t."""

    def __init__(self, joint: TabularJoint):
        self.joint = joint
        self.vocab: Vocabulary = joint.vocab

    def decode(self, request: BlockRequest, rng: np.random.Generator, greedy: bool = False,
               temperature: float = 1.0, top_p: float = 1.0) -> BlockDecoding:
        prefix: List[int] = list(request.prefix)
        tokens, dists = [], []
        for step in range(request.remaining):
            try:
                dist = block_conditional(self.joint, request.x_t, request.part, request.block, prefix)
            except UnreachableEvidence:
                # only a top-k restricted step may leave the joint's support
                if request.support is None:
                    raise
                log.debug("Block %d prefix %s has zero mass; using the marginal", request.block, prefix)
                dist = np.asarray(request.marginals[len(request.prefix) + step], dtype=np.float64)
            if request.support is not None:
                truncated = request.support.truncated_marginals()
                dist = restrict_to_support(dist, request.support.sets[step], truncated[step])
            tok = sample_token(dist, rng, greedy=greedy, temperature=temperature, top_p=top_p)
            tokens.append(tok)
            dists.append(dist)
            prefix.append(tok)
        return BlockDecoding(tokens=tokens, dists=np.array(dists).reshape(len(dists), self.vocab.size))


class MarginalExecutor:
    """Ignores the block prompt and draws each position from the predictor's marginal."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def decode(self, request: BlockRequest, rng: np.random.Generator, greedy: bool = False,
               temperature: float = 1.0, top_p: float = 1.0) -> BlockDecoding:
        rows = np.asarray(request.marginals[len(request.prefix):], dtype=np.float64)
        if request.support is not None:
            rows = request.support.truncated_marginals()
        tokens = [sample_token(row, rng, greedy=greedy, temperature=temperature, top_p=top_p) for row in rows]
        return BlockDecoding(tokens=tokens, dists=rows.copy(), calls=0)
