"""
Tests for the exact-oracle verification report.
"""

import math

import pytest

from app.evals import theorems
from app.evals.theorems import (
    check_chain_rule,
    check_forward_kernels,
    check_mode_exclusion,
    check_nelbo,
    check_nelbo_hand_instance,
    verify_theorems,
)
from engine.errors import IntractableInstance


@pytest.fixture(scope="module")
def small_report():
    return verify_theorems(trials=4, seed=0, product_trials=20, max_vocab=4, max_L=3, max_T=3, x0_per_joint=2)


class TestReport:
    def test_every_check_passes(self, small_report):
        assert small_report.passed, small_report.render()

    def test_check_names(self, small_report):
        names = [c.name for c in small_report.checks]
        assert names == [
            "kl_identity", "nelbo_ordering", "nelbo_gap", "nelbo_hand_instance",
            "mode_exclusion", "chain_rule", "forward_kernels",
        ]

    def test_frame_and_render(self, small_report):
        frame = small_report.to_frame()
        assert list(frame["name"]) == [c.name for c in small_report.checks]
        assert "overall: PASS" in small_report.render()

    def test_bits_scale_the_hand_instance(self):
        report = verify_theorems(trials=1, product_trials=1, max_vocab=3, max_L=2, max_T=2, x0_per_joint=1,
                                 bits=True)
        hand = next(c for c in report.checks if c.name == "nelbo_hand_instance")
        assert "1.000000000000 bits" in hand.detail

    def test_nelbo_error_fails_both_rows(self, monkeypatch):
        """A raising NELBO sweep still reports every row it would have produced."""

        def broken(*args, **kwargs):
            raise IntractableInstance("joint too large")

        monkeypatch.setattr(theorems, "check_nelbo", broken)
        report = verify_theorems(trials=1, product_trials=1, max_vocab=3, max_L=2, max_T=2, x0_per_joint=1)
        rows = {c.name: c for c in report.checks}
        for name in ("nelbo_ordering", "nelbo_gap"):
            assert not rows[name].passed
            assert rows[name].max_deviation == math.inf
            assert "joint too large" in rows[name].detail
        assert len(report.checks) == 7
        assert not report.passed


class TestIndividualChecks:
    def test_nelbo_on_fifty_joints(self):
        ordering, gap = check_nelbo(trials=50, tol=1e-9, seed=0, scale=1.0)
        assert ordering.passed
        assert gap.passed
        assert gap.max_deviation < 1e-9

    def test_hand_instance(self):
        result = check_nelbo_hand_instance(1.0, "nats")
        assert result.passed
        assert f"{math.log(2):.12f}" in result.detail

    def test_mode_exclusion(self):
        result = check_mode_exclusion(product_trials=100, seed=0)
        assert result.passed
        assert "excluded at k=1: True" in result.detail

    def test_chain_rule(self):
        assert check_chain_rule(trials=10, tol=1e-9, seed=1).passed

    def test_forward_kernels(self):
        assert check_forward_kernels(trials=30, tol=1e-12, seed=2).passed
