"""
Tests for the block-granular decoding loop.
"""

import logging
import math

import numpy as np
import pytest

from app.evals.metrics import binomial_stderr, validity_rate
from app.languages import make_language
from app.models.oracle_models import MarginalExecutor, OracleExecutor, OraclePredictor
from engine.decoding import (
    GenerationState,
    SchedulerConfig,
    apply_eos_termination,
    block_entropy,
    candidate_scope,
    generate,
    iteration_budget,
    k_star,
    prefix_means,
    select_dynamic,
    select_static,
)
from engine.diffusion import BlockPartition, Vocabulary, derive_rng
from engine.errors import ContractViolation, StepBudgetExceeded, UnreachableEvidence
from engine.interfaces import BlockDecoding, BlockExecutor, BlockRequest, MarginalPredictor
from engine.oracle import frechet_truncate, random_joint, uniform_joint


class UniformPredictor:
    """Uniform over content tokens at every masked position."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def predict(self, x_t):
        out = np.zeros((len(x_t), self.vocab.size))
        content = list(self.vocab.content_ids)
        for pos, tok in enumerate(x_t):
            if tok == self.vocab.mask_id:
                out[pos, content] = 1.0 / len(content)
            else:
                out[pos, tok] = 1.0
        return out


class BoundaryExecutor:
    """Emits the opening boundary token for every position."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def decode(self, request, rng, greedy=False, temperature=1.0, top_p=1.0):
        n = request.remaining
        dists = np.zeros((n, self.vocab.size))
        dists[:, self.vocab.bot_id] = 1.0
        return BlockDecoding(tokens=[self.vocab.bot_id] * n, dists=dists)


@pytest.fixture
def content8():
    return Vocabulary.with_content(8)


@pytest.fixture
def aa_bb(vocab2):
    return uniform_joint(vocab2, [(0, 0), (1, 1)])


@pytest.fixture
def paired8():
    return make_language("paired-tokens", 8, {"n_pairs": 4})


def masked_state(L, B, vocab, decoded_blocks=()):
    state = GenerationState.start([], BlockPartition(L, B), vocab)
    for block in decoded_blocks:
        start, stop = state.part.span(block)
        state.seq[start:stop] = 0
    return state


class TestEntropy:
    """Mean-entropy block scores."""

    def test_point_masses_have_zero_entropy(self, content8):
        dists = np.eye(content8.size)[[0, 3, 5]]
        assert block_entropy(dists, 3) == pytest.approx(0.0)

    def test_uniform_rows(self):
        dists = np.full((3, 4), 0.25)
        assert block_entropy(dists, 3) == pytest.approx(math.log(4))

    def test_prefix_mean(self):
        np.testing.assert_allclose(prefix_means([0.1, 0.2, 0.9]), [0.1, 0.15, 0.4])

    def test_k_zero_rejected(self):
        with pytest.raises(ContractViolation):
            block_entropy(np.full((2, 2), 0.5), 0)


class TestSelection:
    def test_static_argmin(self):
        assert select_static([3, 4, 5], [0.5, 0.2, 0.9]) == [4]

    def test_static_tie_goes_to_lower_block(self):
        assert select_static([6, 2], [0.2, 0.2]) == [2]

    def test_static_two_per_step(self):
        assert select_static([3, 4, 5], [0.5, 0.2, 0.9], n=2) == [4, 3]

    def test_static_empty(self):
        with pytest.raises(ContractViolation):
            select_static([], [])

    def test_dynamic_longest_prefix(self):
        choice = select_dynamic([0], [[0.1, 0.2, 0.9, 0.9]], 0.2, [0.5])
        assert (choice.block, choice.k, choice.fallback) == (0, 2, False)
        assert choice.entropy == pytest.approx(0.15)

    def test_dynamic_prefers_larger_k_then_lower_entropy(self):
        choice = select_dynamic([1, 2, 3], [[0.1, 0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.1]], 0.2, [0.1, 0.1, 0.1])
        assert (choice.block, choice.k) == (2, 3)

    def test_dynamic_fallback_when_nothing_qualifies(self):
        choice = select_dynamic([4, 5, 6], [[1.0, 1.0], [0.9, 0.9], [0.1, 2.0]], 0.2, [0.8, 0.3, 0.6])
        assert choice.fallback
        assert choice.k == 1
        assert choice.block == 5

    def test_k_star_monotone_in_tau(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            profile = rng.exponential(0.5, size=int(rng.integers(1, 9)))
            lo, hi = np.sort(rng.uniform(0.0, 2.0, size=2))
            assert k_star(profile, lo) <= k_star(profile, hi)


class TestGenerationState:
    def test_prompt_is_pinned(self, vocab2):
        state = GenerationState.start([0, 1], BlockPartition(4, 2), vocab2)
        with pytest.raises(ContractViolation):
            state.commit([0], [1])
        assert state.frontier == 1

    def test_commit_once(self, vocab2):
        state = GenerationState.start([], BlockPartition(4, 2), vocab2)
        state.commit([2], [1])
        with pytest.raises(ContractViolation):
            state.commit([2], [0])
        assert state.status(1) == "partial(1)"
        assert state.status(0) == "untouched"

    def test_prompt_longer_than_L(self, vocab2):
        with pytest.raises(ContractViolation):
            GenerationState.start([0] * 5, BlockPartition(4, 2), vocab2)


class TestCandidateScope:
    """Candidates start at the frontier."""

    def test_default_scope(self, content8):
        state = masked_state(80, 4, content8, decoded_blocks=(0, 1, 2))
        assert candidate_scope(state, 10) == list(range(3, 13))

    def test_wide_scope_takes_everything_left(self, content8):
        state = masked_state(80, 4, content8, decoded_blocks=(0, 1, 2))
        assert candidate_scope(state, 50) == list(range(3, 20))

    def test_skips_finished_blocks(self, content8):
        state = masked_state(16, 4, content8, decoded_blocks=(0, 2))
        assert candidate_scope(state, 10) == [1, 3]


class TestEosTermination:
    def test_fills_after_eos_at_frontier(self, vocab2):
        state = GenerationState.start([0, vocab2.eos_id], BlockPartition(4, 2), vocab2)
        assert apply_eos_termination(state) == 2
        assert state.done
        assert state.seq.tolist() == [0, vocab2.eos_id, vocab2.eos_id, vocab2.eos_id]
        [entry] = state.trace
        assert entry.kind == "eos_fill"
        assert entry.positions == (2, 3)
        assert entry.k == 2 and entry.block == 1
        assert entry.as_row()["kind"] == "eos_fill"

    def test_eos_beyond_frontier_waits(self, vocab2):
        state = GenerationState.start([], BlockPartition(4, 2), vocab2)
        state.commit([2], [vocab2.eos_id])
        assert apply_eos_termination(state) == 0
        assert state.masked.sum() == 3

    def test_boundary_tokens_become_eos(self, content8, caplog):
        cfg = SchedulerConfig(mode="static")
        with caplog.at_level(logging.WARNING):
            result = generate([], 4, 2, UniformPredictor(content8), BoundaryExecutor(content8), cfg, seed=0)
        assert result.tokens.tolist() == [content8.eos_id] * 4
        assert result.stats["eos_filled"] == 2
        assert result.stats["steps"] == 1
        assert "replaced by EOS" in caplog.text

    def test_trace_accounts_for_eos_filled_positions(self, content8):
        """Commits plus EOS fills cover every generated position."""
        cfg = SchedulerConfig(mode="static")
        result = generate([], 4, 2, UniformPredictor(content8), BoundaryExecutor(content8), cfg, seed=0)
        assert [e.kind for e in result.trace] == ["commit", "eos_fill"]
        assert result.trace[1].k == result.stats["eos_filled"]
        assert result.trace[1].tokens == (content8.eos_id,) * 2
        assert sum(e.k for e in result.trace) == 4

    def test_oracle_with_eos_language(self, vocab2):
        eos = vocab2.eos_id
        q = uniform_joint(vocab2, [(0, eos, eos, eos), (1, 0, eos, eos), (1, 1, 0, 1)])
        cfg = SchedulerConfig(mode="static")
        for seed in range(30):
            result = generate([], 4, 2, OraclePredictor(q), OracleExecutor(q), cfg, seed)
            assert q.prob(result.tokens) > 0


class TestStaticMode:
    """Fixed-rate accounting."""

    def test_sixteen_iterations_for_L64_B4(self, content8):
        cfg = SchedulerConfig(mode="static")
        result = generate([], 64, 4, UniformPredictor(content8), MarginalExecutor(content8), cfg, seed=1)
        assert result.stats["steps"] == 16
        assert result.stats["tokens_per_step"] == 4
        assert all(entry.k == 4 for entry in result.trace)

    def test_two_blocks_per_step(self, content8):
        cfg = SchedulerConfig(mode="static", blocks_per_step=2)
        result = generate([], 32, 4, UniformPredictor(content8), MarginalExecutor(content8), cfg, seed=1)
        assert result.stats["steps"] == 4
        assert result.stats["tokens_per_step"] == 8

    def test_scope_containment(self, paired8):
        q = paired8.joint
        for mode in ("static", "dynamic", "token"):
            cfg = SchedulerConfig(mode=mode, scope=2, tau=0.5)
            result = generate([], 8, 2, OraclePredictor(q), OracleExecutor(q), cfg, seed=3)
            for entry in result.trace:
                assert entry.block in result.state.scopes[entry.iteration]
                assert {p // 2 for p in entry.positions} == {entry.block}

    def test_prompt_is_kept(self, paired8):
        q = paired8.joint
        cfg = SchedulerConfig(mode="static")
        result = generate([2, 3, 1], 8, 2, OraclePredictor(q), OracleExecutor(q), cfg, seed=0)
        assert result.tokens[:3].tolist() == [2, 3, 1]
        assert result.tokens[3] == 2
        assert paired8.is_valid(result.tokens)

    def test_deterministic(self, paired8):
        q = paired8.joint
        cfg = SchedulerConfig(mode="dynamic", tau=0.3)
        a = generate([], 8, 4, OraclePredictor(q), OracleExecutor(q), cfg, seed=11)
        b = generate([], 8, 4, OraclePredictor(q), OracleExecutor(q), cfg, seed=11)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert [e.as_row() for e in a.trace] == [e.as_row() for e in b.trace]


class TestDynamicMode:
    def test_tiny_tau_is_sequential(self, content8):
        cfg = SchedulerConfig(mode="dynamic", tau=1e-9)
        result = generate([], 16, 4, UniformPredictor(content8), MarginalExecutor(content8), cfg, seed=0)
        assert result.stats["steps"] == 16
        assert result.stats["tokens_per_step"] == 1
        assert all(entry.fallback for entry in result.trace)

    def test_huge_tau_commits_whole_blocks(self, content8):
        cfg = SchedulerConfig(mode="dynamic", tau=1e9)
        result = generate([], 16, 4, UniformPredictor(content8), MarginalExecutor(content8), cfg, seed=0)
        assert result.stats["tokens_per_step"] == 4
        assert not any(entry.fallback for entry in result.trace)

    def test_fallback_samples_denoiser_marginal(self, aa_bb):
        cfg = SchedulerConfig(mode="dynamic", tau=1e-9)
        result = generate([], 2, 2, OraclePredictor(aa_bb), OracleExecutor(aa_bb), cfg, seed=4)
        assert result.trace[0].fallback
        assert result.trace[0].k == 1
        assert tuple(result.tokens) in {(0, 0), (1, 1)}

    def test_tau_must_be_positive(self):
        with pytest.raises(ContractViolation):
            SchedulerConfig(mode="dynamic", tau=0.0)


class TestCoherence:
    """Exact block conditionals never commit incoherent blocks."""

    def test_oracle_blocks_are_coherent(self, aa_bb):
        cfg = SchedulerConfig(mode="static")
        for seed in range(200):
            result = generate([], 2, 2, OraclePredictor(aa_bb), OracleExecutor(aa_bb), cfg, seed)
            assert tuple(result.tokens) in {(0, 0), (1, 1)}

    def test_token_independent_baseline_is_incoherent_half_the_time(self, aa_bb):
        cfg = SchedulerConfig(mode="token", tokens_per_step=2)
        n = 2000
        bad = 0
        for seed in range(n):
            result = generate([], 2, 2, OraclePredictor(aa_bb), None, cfg, seed)
            bad += result.tokens[0] != result.tokens[1]
        assert abs(bad / n - 0.5) < 3 * binomial_stderr(0.5, n)

    def test_oracle_paired_tokens_all_valid(self, paired8):
        q = paired8.joint
        cfg = SchedulerConfig(mode="static")
        samples = [generate([], 8, 2, OraclePredictor(q), OracleExecutor(q), cfg, s).tokens for s in range(64)]
        assert validity_rate(samples, paired8.is_valid) == 1.0

    def test_parallel_token_sampling_validity(self, paired8):
        q = paired8.joint
        cfg = SchedulerConfig(mode="token", tokens_per_step=8)
        n = 10_000
        rng = derive_rng(0)
        samples = [
            generate([], 8, 2, OraclePredictor(q), None, cfg, int(s)).tokens
            for s in rng.integers(0, 2**31 - 1, size=n)
        ]
        expected = 0.25 ** 4
        assert abs(validity_rate(samples, paired8.is_valid) - expected) < 3 * binomial_stderr(expected, n)

    @pytest.mark.parametrize("mode", ["static", "dynamic", "token"])
    def test_oracle_output_has_positive_mass(self, vocab3, mode):
        rng = derive_rng(21)
        cfg = SchedulerConfig(mode=mode, tau=0.4)
        for i in range(10):
            q = random_joint(vocab3, 4, rng, support_fraction=0.3)
            result = generate([], 4, 2, OraclePredictor(q), OracleExecutor(q), cfg, seed=i)
            assert q.prob(result.tokens) > 0


class TestBudget:
    def test_default_budget(self):
        assert iteration_budget(64, 4, SchedulerConfig()) == 160
        assert iteration_budget(64, 64, SchedulerConfig()) == 64

    def test_budget_exceeded_carries_state(self, content8):
        cfg = SchedulerConfig(mode="static", max_iterations=1)
        with pytest.raises(StepBudgetExceeded) as info:
            generate([], 8, 2, UniformPredictor(content8), MarginalExecutor(content8), cfg, seed=0)
        assert info.value.state.masked.sum() == 6

    def test_block_modes_need_an_executor(self, content8):
        with pytest.raises(ContractViolation):
            generate([], 8, 2, UniformPredictor(content8), None, SchedulerConfig(mode="static"), seed=0)


class TestOracleExecutor:
    """Exact block conditionals and their behavior on zero-mass context."""

    @pytest.fixture
    def aaaa_bbbb(self, vocab2):
        return uniform_joint(vocab2, [(0, 0, 0, 0), (1, 1, 1, 1)])

    def request(self, q, support=None):
        vocab = q.vocab
        x_t = np.array([0, 1, vocab.mask_id, vocab.mask_id])
        marginals = np.zeros((2, vocab.size))
        marginals[:, [0, 1]] = 0.5
        return BlockRequest(x_t=x_t, part=BlockPartition(4, 2), block=1, marginals=marginals, support=support)

    def test_unreachable_context_raises(self, aaaa_bbbb):
        """A context outside the joint's support is an error when nothing restricted the decode."""
        with pytest.raises(UnreachableEvidence):
            OracleExecutor(aaaa_bbbb).decode(self.request(aaaa_bbbb), derive_rng(0))

    def test_restricted_decode_falls_back_to_marginals(self, aaaa_bbbb):
        support = frechet_truncate(self.request(aaaa_bbbb).marginals, 1)
        decoding = OracleExecutor(aaaa_bbbb).decode(self.request(aaaa_bbbb, support), derive_rng(0))
        assert decoding.tokens == [0, 0]


class TestInterfaces:
    def test_models_satisfy_protocols(self, aa_bb):
        assert isinstance(OraclePredictor(aa_bb), MarginalPredictor)
        assert isinstance(OracleExecutor(aa_bb), BlockExecutor)
        assert isinstance(MarginalExecutor(aa_bb.vocab), BlockExecutor)
