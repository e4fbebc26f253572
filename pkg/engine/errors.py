"""
Exception types raised by the engine and the app layer.

All of them derive from BlockLabError so callers can catch the family.
"""

from typing import Any, List, Optional


class BlockLabError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(BlockLabError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class UnreachableEvidence(BlockLabError, ValueError):
    """Conditioning on evidence that has zero mass under the joint."""


class IntractableInstance(BlockLabError, ValueError):
    """An exact computation would exceed the enumeration bounds."""


class ConfigError(BlockLabError, ValueError):
    """A configuration file or section failed validation."""


class CheckpointError(BlockLabError, FileNotFoundError):
    """A checkpoint is missing, has the wrong kind, or mismatched shapes."""


class StepBudgetExceeded(BlockLabError, RuntimeError):
    """Generation did not finish within its iteration cap."""

    def __init__(self, message: str, state: Any = None):
        super().__init__(message)
        self.state = state


class TrainingDiverged(BlockLabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int, recent_losses: Optional[List[float]] = None):
        super().__init__(message)
        self.step = step
        self.recent_losses = recent_losses or []
