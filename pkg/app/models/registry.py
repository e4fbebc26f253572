"""
Model construction, checkpoints and the predictor/executor registry.

Checkpoints are torch.save payloads:
    {"format_version": 1, "kind": "denoiser" | "executor",
     "config": {"vocab": ..., "hparams": ...}, "state_dict": ...}

The registry resolves role names to ready-to-use objects:
- predictor: oracle | neural
- executor: oracle | neural | marginal
Loaded checkpoints are cached per path.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from app.config import DenoiserSection, ExecutorSection
from app.models.denoiser import NeuralPredictor, TinyDenoiser
from app.models.executor import NeuralExecutor, TinyARExecutor
from app.models.oracle_models import MarginalExecutor, OracleExecutor, OraclePredictor
from engine.diffusion import Vocabulary
from engine.errors import CheckpointError, ContractViolation
from engine.oracle import TabularJoint

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def build_denoiser(vocab: Vocabulary, L: int, section: DenoiserSection, seed: int = 0) -> TinyDenoiser:
    torch.manual_seed(seed)
    return TinyDenoiser(vocab, L, d_model=section.d_model, n_layers=section.n_layers,
                        n_heads=section.n_heads, dropout=section.dropout)


def build_executor(vocab: Vocabulary, section: ExecutorSection, seed: int = 0) -> TinyARExecutor:
    torch.manual_seed(seed)
    return TinyARExecutor(vocab, max_block=section.max_block, d_model=section.d_model,
                          n_layers=section.n_layers, n_heads=section.n_heads, dropout=section.dropout)


def save_checkpoint(model: Union[TinyDenoiser, TinyARExecutor], path: Union[str, Path],
                    state_dict: Optional[Dict[str, torch.Tensor]] = None) -> Path:
    """Write a versioned checkpoint; state_dict overrides the model's current weights."""
    kind = "denoiser" if isinstance(model, TinyDenoiser) else "executor"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": {"vocab": model.vocab.to_config(), "hparams": dict(model.hparams)},
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
    }
    torch.save(payload, path)
    log.info("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: Union[str, Path], kind: str) -> Union[TinyDenoiser, TinyARExecutor]:
    """
    Rebuild a model from a checkpoint.

    Raises:
        CheckpointError: missing file, wrong version or kind, or mismatched tensors
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{FORMAT_VERSION} checkpoint")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    config = payload["config"]
    vocab = Vocabulary.from_config(config["vocab"])
    hparams = dict(config["hparams"])
    if kind == "denoiser":
        L = hparams.pop("L")
        model = TinyDenoiser(vocab, L, **hparams)
    else:
        model = TinyARExecutor(vocab, **hparams)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"{path} does not match the {kind} architecture: {e}")
    model.eval()
    return model


class ModelRegistry:
    """Resolves role names to predictor / executor objects."""

    def __init__(self, checkpoint_dir: Optional[Union[str, Path]] = None):
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._models: Dict[str, Any] = {}

    def _resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if not path.is_absolute() and self.checkpoint_dir is not None:
            path = self.checkpoint_dir / path
        return path

    def model(self, path: Union[str, Path], kind: str):
        key = f"{kind}:{self._resolve(path)}"
        if key not in self._models:
            self._models[key] = load_checkpoint(self._resolve(path), kind)
        return self._models[key]

    def predictor(self, name: str, joint: Optional[TabularJoint] = None, checkpoint: Optional[str] = None):
        if name == "oracle":
            if joint is None:
                raise ContractViolation("The oracle predictor needs a tabular joint")
            return OraclePredictor(joint)
        if name == "neural":
            if checkpoint is None:
                raise ContractViolation("The neural predictor needs a checkpoint")
            return NeuralPredictor(self.model(checkpoint, "denoiser"))
        raise ContractViolation(f"Unknown predictor {name!r}")

    def executor(self, name: str, vocab: Vocabulary, joint: Optional[TabularJoint] = None,
                 checkpoint: Optional[str] = None):
        if name == "oracle":
            if joint is None:
                raise ContractViolation("The oracle executor needs a tabular joint")
            return OracleExecutor(joint)
        if name == "marginal":
            return MarginalExecutor(vocab)
        if name == "neural":
            if checkpoint is None:
                raise ContractViolation("The neural executor needs a checkpoint")
            return NeuralExecutor(self.model(checkpoint, "executor"))
        raise ContractViolation(f"Unknown executor {name!r}")

    def clear(self) -> None:
        self._models.clear()


# Global instance
_registry: Optional[ModelRegistry] = None


def get_model_registry(checkpoint_dir: Optional[Union[str, Path]] = None) -> ModelRegistry:
    """Get or create the global model registry."""
    global _registry
    if _registry is None:
        _registry = ModelRegistry(checkpoint_dir)
    elif checkpoint_dir is not None and _registry.checkpoint_dir != Path(checkpoint_dir):
        _registry = ModelRegistry(checkpoint_dir)
    return _registry


def reset_model_registry():
    """Reset the global registry (useful for testing)."""
    global _registry
    _registry = None
