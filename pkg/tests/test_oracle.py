"""
Tests for the exact oracle: tabular joints, conditionals, NELBO bounds and
top-k marginal supports.
"""

import math

import numpy as np
import pytest

from engine.diffusion import BlockPartition, NoiseSchedule, Vocabulary, derive_rng
from engine.errors import ContractViolation, IntractableInstance, UnreachableEvidence
from engine.oracle import (
    TabularJoint,
    block_chain_rule_tv,
    block_conditional,
    conditional_marginal,
    counterexample_joint,
    frechet_truncate,
    kl_closed_form_check,
    mode_exclusion_witness,
    nelbo_bound,
    nelbo_gap,
    nelbo_terms,
    product_joint,
    random_joint,
    random_product_joint,
    ranked_tokens,
    uniform_joint,
)

A, B = 0, 1


@pytest.fixture
def aa_bb(vocab2):
    """q uniform on {AA, BB}."""
    return uniform_joint(vocab2, [(A, A), (B, B)])


class TestTabularJoint:
    def test_probabilities_must_sum_to_one(self, vocab2):
        with pytest.raises(ContractViolation):
            TabularJoint(vocab2, 2, {(0, 0): 0.5, (1, 1): 0.4})

    def test_mask_rejected(self, vocab2):
        with pytest.raises(ContractViolation):
            TabularJoint(vocab2, 2, {(0, vocab2.mask_id): 1.0})

    def test_intractable_space(self):
        vocab = Vocabulary.with_content(9)
        with pytest.raises(IntractableInstance):
            TabularJoint(vocab, 7, {tuple([0] * 7): 1.0})

    def test_marginals_and_mode(self):
        q = counterexample_joint()
        pi = q.marginals()
        assert pi[0, 0] == pytest.approx(0.45)
        assert pi[0, 1] == pytest.approx(0.55)
        assert q.mode() == (0, 0)
        assert q.entropy() == pytest.approx(-sum(p * math.log(p) for p in (0.45, 0.25, 0.25, 0.05)))

    def test_save_load_round_trip(self, tmp_path, vocab3):
        q = random_joint(vocab3, 3, derive_rng(0))
        q.save(tmp_path / "joint.tsv")
        loaded = TabularJoint.load(tmp_path / "joint.tsv", vocab3)
        np.testing.assert_array_equal(loaded.seqs, q.seqs)
        np.testing.assert_array_equal(loaded.probs, q.probs)

    def test_load_malformed(self, tmp_path, vocab2):
        path = tmp_path / "bad.tsv"
        path.write_text("0 1 0.5\n")
        with pytest.raises(ContractViolation):
            TabularJoint.load(path, vocab2)


class TestConditionalMarginal:
    """Exact q(x_0^pos | x_t)."""

    def test_fully_masked(self, aa_bb, vocab2):
        M = vocab2.mask_id
        dist = conditional_marginal(aa_bb, [M, M], 0)
        assert dist[A] == pytest.approx(0.5)
        assert dist[B] == pytest.approx(0.5)
        assert dist[M] == 0.0

    def test_conditioning_kills_incompatible(self, aa_bb, vocab2):
        dist = conditional_marginal(aa_bb, [A, vocab2.mask_id], 1)
        assert dist[A] == pytest.approx(1.0)

    def test_point_mass(self, vocab3):
        q = uniform_joint(vocab3, [(0, 1, 2)])
        M = vocab3.mask_id
        assert conditional_marginal(q, [M, M, M], 1)[1] == pytest.approx(1.0)

    def test_zero_mass_evidence(self, vocab2):
        q = uniform_joint(vocab2, [(A, A)])
        with pytest.raises(UnreachableEvidence):
            conditional_marginal(q, [B, vocab2.mask_id], 1)

    def test_unmasked_position_rejected(self, aa_bb, vocab2):
        with pytest.raises(ContractViolation):
            conditional_marginal(aa_bb, [A, vocab2.mask_id], 0)


class TestBlockConditional:
    def test_prefix_resolves_dependency(self, aa_bb, vocab2):
        part = BlockPartition(2, 2)
        M = vocab2.mask_id
        assert block_conditional(aa_bb, [M, M], part, 0, [A])[A] == pytest.approx(1.0)
        empty = block_conditional(aa_bb, [M, M], part, 0, [])
        np.testing.assert_allclose(empty, conditional_marginal(aa_bb, [M, M], 0))

    def test_product_joint_ignores_prefix(self, vocab3):
        q = random_product_joint(vocab3, 2, derive_rng(3))
        part = BlockPartition(2, 2)
        M = vocab3.mask_id
        second = block_conditional(q, [M, M], part, 0, [1])
        np.testing.assert_allclose(second, q.marginals()[1], atol=1e-12)

    def test_prefix_must_be_shorter_than_block(self, aa_bb, vocab2):
        M = vocab2.mask_id
        with pytest.raises(ContractViolation):
            block_conditional(aa_bb, [M, M], BlockPartition(2, 2), 0, [A, A])

    def test_chain_rule_reproduces_block_joint(self, vocab3):
        rng = derive_rng(0, 99)
        for _ in range(20):
            q = random_joint(vocab3, 4, rng, support_fraction=0.5)
            part = BlockPartition(4, 2)
            for block in range(2):
                assert block_chain_rule_tv(q, part, block) < 1e-12


class TestNelbo:
    """Block-size ordering and the total-correlation gap."""

    def test_hand_instance_gap_is_ln2(self, aa_bb):
        sched = NoiseSchedule.linear_alpha(1)
        assert nelbo_gap(aa_bb, sched, 2) == pytest.approx(math.log(2), abs=1e-12)
        assert nelbo_bound(aa_bb, sched, 1) - nelbo_bound(aa_bb, sched, 2) == pytest.approx(math.log(2), abs=1e-12)

    def test_whole_sequence_block_is_entropy(self, aa_bb):
        sched = NoiseSchedule.linear_alpha(1)
        assert nelbo_bound(aa_bb, sched, 2) == pytest.approx(aa_bb.entropy(), abs=1e-12)

    def test_product_joint_has_no_gap(self, vocab3):
        q = random_product_joint(vocab3, 4, derive_rng(1))
        sched = NoiseSchedule.linear_alpha(2)
        for B in (2, 4):
            assert abs(nelbo_gap(q, sched, B)) < 1e-9
            assert nelbo_bound(q, sched, B) == pytest.approx(nelbo_bound(q, sched, 1), abs=1e-9)

    def test_ordering_and_gap_identity(self, vocab3):
        rng = derive_rng(2)
        sched = NoiseSchedule.linear_alpha(2)
        for _ in range(10):
            q = random_joint(vocab3, 4, rng)
            b1, b2, b4 = (nelbo_bound(q, sched, B) for B in (1, 2, 4))
            assert b1 >= b2 - 1e-9
            assert b2 >= b4 - 1e-9
            assert abs(nelbo_gap(q, sched, 2) - (b1 - b2)) < 1e-9
            assert abs(nelbo_gap(q, sched, 4) - (b1 - b4)) < 1e-9

    def test_terms_are_per_step(self, aa_bb):
        terms = nelbo_terms(aa_bb, NoiseSchedule.linear_alpha(3), 1)
        assert [t.t for t in terms] == [1, 2, 3]
        assert all(t.total_correlation >= -1e-12 for t in terms)


class TestKlIdentity:
    def test_closed_form_matches_brute_force(self, vocab3):
        rng = derive_rng(4)
        for T in (1, 2, 3):
            q = random_joint(vocab3, 3, rng)
            sched = NoiseSchedule.linear_alpha(T)
            for x0 in q.sample(3, rng):
                for t in range(1, T + 1):
                    closed, brute = kl_closed_form_check(q, sched, x0, t)
                    assert abs(closed - brute) < 1e-9

    def test_zero_mass_x0(self, aa_bb):
        with pytest.raises(UnreachableEvidence):
            kl_closed_form_check(aa_bb, NoiseSchedule.linear_alpha(1), [A, B], 1)

    @pytest.mark.parametrize("t", [0, -1, 4])
    def test_step_outside_schedule(self, aa_bb, t):
        """Only steps 1..T have a reverse transition to compare."""
        with pytest.raises(ContractViolation):
            kl_closed_form_check(aa_bb, NoiseSchedule.linear_alpha(3), [A, A], t)


class TestFrechetTruncation:
    """Top-k marginal supports and mode exclusion."""

    def test_ranked_tokens_tie_break(self):
        assert ranked_tokens(np.array([0.25, 0.25, 0.5, 0.0])) == [2, 0, 1]

    def test_counterexample_top1_support(self):
        q = counterexample_joint()
        support = frechet_truncate(q.marginals(), 1)
        assert support.product == [(1, 0)]
        assert q.vocab.render(support.product[0]) == "Houston Roger"

    def test_uniform_product_size(self):
        pi = np.zeros((2, 8))
        pi[:, :4] = 0.25
        support = frechet_truncate(pi, 2)
        assert support.product_size == 4
        assert support.sets == ((0, 1), (0, 1))

    def test_truncated_marginals_renormalize(self):
        support = frechet_truncate(np.array([[0.5, 0.3, 0.2]]), 2)
        np.testing.assert_allclose(support.truncated_marginals(), [[0.625, 0.375, 0.0]])

    def test_k_zero_rejected(self):
        with pytest.raises(ContractViolation):
            frechet_truncate(np.array([[1.0, 0.0]]), 0)

    def test_mode_exclusion_counterexample(self):
        q = counterexample_joint()
        top1 = mode_exclusion_witness(q, 1)
        assert top1.excluded
        assert top1.mode == (0, 0)
        assert not mode_exclusion_witness(q, 2).excluded

    def test_product_joints_never_excluded(self, vocab3):
        rng = derive_rng(12)
        for _ in range(50):
            q = random_product_joint(vocab3, int(rng.integers(2, 5)), rng)
            for k in (1, 2):
                assert not mode_exclusion_witness(q, k).excluded

    def test_product_joint_matches_marginals(self, vocab2):
        marginals = np.zeros((2, vocab2.size))
        marginals[0, :2] = [0.3, 0.7]
        marginals[1, :2] = [0.6, 0.4]
        q = product_joint(vocab2, marginals)
        np.testing.assert_allclose(q.marginals(), marginals, atol=1e-12)
