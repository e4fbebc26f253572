"""
Evaluation for the block decoding engine.

Provides sample metrics and the exact-oracle verification report.
"""

from app.evals.metrics import exact_match_rate, validity_rate
from app.evals.theorems import CheckResult, VerifyReport, verify_theorems

__all__ = ["exact_match_rate", "validity_rate", "CheckResult", "VerifyReport", "verify_theorems"]
