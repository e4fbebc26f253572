"""
Tests for soft conditioning and the executor prompt layout.
"""

import numpy as np
import pytest
import torch

from app.models.conditioning import block_prompt, build_block_prompt, hard_condition_prompt, soft_embed
from engine.diffusion import Vocabulary
from engine.errors import ContractViolation
from engine.oracle import counterexample_joint


@pytest.fixture
def vocab():
    return Vocabulary.with_content(8)


@pytest.fixture
def E(vocab):
    torch.manual_seed(0)
    return torch.randn(vocab.size, 6, dtype=torch.float64)


def point_mass(vocab, tokens):
    pi = np.zeros((len(tokens), vocab.size))
    pi[np.arange(len(tokens)), tokens] = 1.0
    return pi


class TestSoftEmbed:
    def test_point_mass_is_hard_embedding(self, vocab, E):
        out = soft_embed(point_mass(vocab, [3]), E)
        torch.testing.assert_close(out[0], E[3])

    def test_uniform_pair_is_average(self, vocab, E):
        pi = np.zeros((1, vocab.size))
        pi[0, [1, 2]] = 0.5
        torch.testing.assert_close(soft_embed(pi, E)[0], (E[1] + E[2]) / 2)

    def test_linear_in_marginals(self, vocab, E):
        rng = np.random.default_rng(0)
        content = list(vocab.content_ids)
        for _ in range(20):
            pa, pb = np.zeros((3, vocab.size)), np.zeros((3, vocab.size))
            pa[:, content] = rng.dirichlet(np.ones(len(content)), size=3)
            pb[:, content] = rng.dirichlet(np.ones(len(content)), size=3)
            lam = rng.uniform()
            mixed = soft_embed(lam * pa + (1 - lam) * pb, E)
            combined = lam * soft_embed(pa, E) + (1 - lam) * soft_embed(pb, E)
            assert torch.max(torch.abs(mixed - combined)) < 1e-6

    def test_rejects_unnormalized(self, vocab, E):
        with pytest.raises(ContractViolation):
            soft_embed(np.full((1, vocab.size), 0.5), E)

    def test_rejects_wrong_width(self, E):
        with pytest.raises(ContractViolation):
            soft_embed(np.ones((1, 3)) / 3, E)


class TestBlockPrompt:
    """Prompt is [E(<think>), rows..., E(</think>)]."""

    @pytest.mark.parametrize("B", [1, 2, 4])
    def test_length_and_boundaries(self, vocab, E, B):
        pi = point_mass(vocab, [0] * B)
        prompt = block_prompt(pi, E, vocab)
        assert prompt.shape == (B + 2, E.shape[1])
        torch.testing.assert_close(prompt[0], E[vocab.bot_id])
        torch.testing.assert_close(prompt[-1], E[vocab.eot_id])

    def test_soft_equals_hard_for_point_masses(self, vocab, E):
        pi = point_mass(vocab, [2, 5, 1])
        torch.testing.assert_close(block_prompt(pi, E, vocab, "soft"), hard_condition_prompt(pi, E, vocab))

    def test_eos_row_becomes_hard(self, vocab, E):
        pi = np.zeros((2, vocab.size))
        pi[0, [vocab.eos_id, 0]] = [0.6, 0.4]
        pi[1, [1, 2]] = 0.5
        prompt = build_block_prompt(soft_embed(pi, E), E, vocab, pi)
        torch.testing.assert_close(prompt[1], E[vocab.eos_id])
        torch.testing.assert_close(prompt[2], (E[1] + E[2]) / 2)

    def test_top1_counterexample_rows(self):
        q = counterexample_joint()
        vocab = q.vocab
        E = torch.randn(vocab.size, 4, dtype=torch.float64)
        prompt = block_prompt(q.marginals(), E, vocab, "top1")
        houston, roger = 1, 0
        torch.testing.assert_close(prompt[1], E[houston])
        torch.testing.assert_close(prompt[2], E[roger])

    def test_batched(self, vocab, E):
        pi = np.stack([point_mass(vocab, [0, 1]), point_mass(vocab, [2, 3])])
        assert block_prompt(pi, E, vocab).shape == (2, 4, E.shape[1])

    def test_unknown_conditioning(self, vocab, E):
        with pytest.raises(ContractViolation):
            block_prompt(point_mass(vocab, [0]), E, vocab, "hard")
