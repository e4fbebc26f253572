"""
Tests for sample metrics.
"""

import pytest

from app.evals.metrics import binomial_stderr, exact_match_rate, product_of_marginals_validity, validity_rate
from app.languages import make_language
from engine.errors import ContractViolation
from engine.oracle import counterexample_joint


class TestValidity:
    def test_all_valid(self):
        lang = make_language("paired-tokens", 4)
        assert validity_rate([[0, 1, 2, 3], [3, 0, 1, 2]], lang.is_valid) == 1.0

    def test_fraction(self):
        lang = make_language("paired-tokens", 4)
        assert validity_rate([[0, 1, 2, 3], [0, 0, 0, 0]], lang.is_valid) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            validity_rate([], lambda s: True)


class TestExactMatch:
    def test_fraction(self):
        assert exact_match_rate([[0, 1], [1, 1]], [[0, 1], [0, 0]]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            exact_match_rate([[0, 1]], [])


class TestProductOfMarginals:
    """Validity of token-independent sampling, computed exactly."""

    def test_paired_tokens(self):
        lang = make_language("paired-tokens", 8, {"n_pairs": 4})
        assert product_of_marginals_validity(lang.joint) == pytest.approx(0.25**4)

    def test_counterexample(self):
        expected = 0.45 * 0.45 + 0.55 * (0.25 + 0.25 + 0.05)
        assert product_of_marginals_validity(counterexample_joint()) == pytest.approx(expected)

    def test_stderr(self):
        assert binomial_stderr(0.5, 100) == pytest.approx(0.05)
