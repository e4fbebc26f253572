"""
Configuration loading and validation.

Configs are YAML files with one mapping per section:
- schedule: noise schedule (T, linear-alpha or explicit betas)
- language: synthetic language and corpus sizes
- denoiser / executor: model shapes, pretraining knobs and checkpoint paths
- train: executor training recipe
- decode: scheduler settings for a single generation run
- bench: the grid swept by `bench`
- verify: exact-oracle check sizes

Environment variables (loaded from .env when present):
- BLOCKLAB_OUTPUT_DIR: artifact directory (default ./data)
- BLOCKLAB_CONFIG: config file used when none is given on the command line
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from engine.decoding import SchedulerConfig
from engine.diffusion import NoiseSchedule
from engine.errors import ConfigError

load_dotenv()

DEFAULT_CONFIG = "./configs/config.yaml"
DEFAULT_OUTPUT_DIR = "./data"
HASH_LENGTH = 12


class Section(BaseModel):
    model_config = {"extra": "forbid"}


class ScheduleSection(Section):
    """Forward-process noise schedule."""
    T: int = Field(default=8, ge=1, description="Number of diffusion steps")
    schedule: Literal["linear-alpha", "explicit"] = Field(default="linear-alpha", description="Schedule family")
    beta: Optional[List[float]] = Field(default=None, description="Per-step masking rates for explicit schedules")

    def build(self) -> NoiseSchedule:
        try:
            return NoiseSchedule.from_config(self.model_dump())
        except ValueError as e:
            raise ConfigError(f"Invalid schedule section: {e}")


class LanguageSection(Section):
    """Synthetic language and corpus split sizes."""
    kind: Literal["paired-tokens", "bracket-balance", "copy-with-separator"] = "paired-tokens"
    L: int = Field(default=8, ge=2, description="Sequence length")
    n_pairs: int = Field(default=4, ge=2, description="Pair types for paired-tokens")
    interleave: int = Field(default=0, ge=0, le=1, description="Pair layout for paired-tokens")
    depth: int = Field(default=2, ge=1, description="Maximum nesting depth for bracket-balance")
    alphabet: int = Field(default=3, ge=1, description="Symbols (excluding the separator) for copy-with-separator")
    n_train: int = Field(default=4096, ge=1, description="Training sequences")
    n_val: int = Field(default=512, ge=1, description="Validation sequences")
    seed: int = Field(default=0, description="Corpus seed")

    def params(self) -> Dict[str, int]:
        return {"n_pairs": self.n_pairs, "interleave": self.interleave, "depth": self.depth,
                "alphabet": self.alphabet}


class DenoiserSection(Section):
    """TinyDenoiser shape and token-level pretraining."""
    d_model: int = Field(default=64, ge=8)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    steps: int = Field(default=2000, ge=0, description="Pretraining optimizer steps")
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    log_every: int = Field(default=100, ge=1)
    checkpoint: str = Field(default="denoiser.pt", description="Path relative to the output directory")


class ExecutorSection(Section):
    """TinyARExecutor shape."""
    d_model: int = Field(default=64, ge=8)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    max_block: int = Field(default=8, ge=1, description="Largest block size the executor accepts")
    checkpoint: str = Field(default="executor_B{B}_{conditioning}.pt", description="Checkpoint path template")


class TrainSection(Section):
    """Executor training recipe."""
    steps: int = Field(default=1500, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    warmup_ratio: float = Field(default=0.03, ge=0, le=1)
    max_grad_norm: float = Field(default=7.0, gt=0)
    micro_batch: int = Field(default=2, ge=1)
    grad_accum: int = Field(default=4, ge=1, description="micro_batch x grad_accum is the effective batch")
    block_size: int = Field(default=2, ge=1)
    masking: Literal["block", "span"] = Field(default="block", description="Block masking or a fixed aligned span")
    span: int = Field(default=8, ge=1, description="Span length for span masking")
    conditioning: Literal["soft", "top1"] = "soft"
    val_every: int = Field(default=100, ge=1)
    smooth_window: int = Field(default=100, ge=1)
    log_every: int = Field(default=50, ge=1)
    seed: int = 0


class DecodeSection(Section):
    """Scheduler settings for decoding."""
    mode: Literal["static", "dynamic", "token"] = "static"
    block_size: int = Field(default=2, ge=1)
    tau: float = Field(default=0.2, gt=0, description="Entropy threshold in nats (dynamic)")
    scope: int = Field(default=10, ge=1, description="Candidate horizon in blocks")
    blocks_per_step: int = Field(default=1, ge=1)
    tokens_per_step: int = Field(default=1, ge=1, description="Positions per iteration in token mode")
    temperature: float = Field(default=0.1, gt=0)
    top_p: float = Field(default=0.8, gt=0, le=1)
    greedy: bool = False
    conditioning: Literal["soft", "top1"] = "soft"
    topk: Optional[int] = Field(default=None, ge=1, description="Restrict the executor to top-k marginal sets")
    predictor: Literal["oracle", "neural"] = "oracle"
    executor: Literal["oracle", "neural", "marginal"] = "oracle"
    n_samples: int = Field(default=64, ge=1)
    prompt_fraction: float = Field(default=0.0, ge=0, lt=1, description="Share of a validation sequence pinned as prompt")
    seed: int = 0

    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(
            mode=self.mode,
            tau=self.tau,
            scope=self.scope,
            blocks_per_step=self.blocks_per_step,
            tokens_per_step=self.tokens_per_step,
            temperature=self.temperature,
            top_p=self.top_p,
            greedy=self.greedy,
            conditioning=self.conditioning,
            topk=self.topk,
        )


class BenchSection(Section):
    """Grid swept by bench; every list is one axis."""
    mode: List[Literal["static", "dynamic", "token"]] = Field(default_factory=lambda: ["static"])
    block_size: List[int] = Field(default_factory=lambda: [2, 4, 8])
    tau: List[float] = Field(default_factory=lambda: [0.2])
    scope: List[int] = Field(default_factory=lambda: [10])
    conditioning: List[Literal["soft", "top1"]] = Field(default_factory=lambda: ["soft"])
    topk: List[Optional[int]] = Field(default_factory=lambda: [None])
    seeds: List[int] = Field(default_factory=lambda: [0])
    n_samples: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _nonempty(self):
        for name in ("mode", "block_size", "tau", "scope", "conditioning", "topk", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"bench.{name} must list at least one value")
        return self


class VerifySection(Section):
    """Sizes and trial counts for the exact-oracle checks."""
    trials: int = Field(default=50, ge=1)
    product_trials: int = Field(default=100, ge=1)
    max_vocab: int = Field(default=5, ge=2, description="Largest emittable alphabet in the KL sweep")
    max_L: int = Field(default=4, ge=1)
    max_T: int = Field(default=4, ge=1)
    x0_per_joint: int = Field(default=4, ge=1, description="Sequences checked per joint in the KL sweep")
    tolerance: float = Field(default=1e-9, gt=0)
    seed: int = 0


class BlockLabConfig(Section):
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    language: LanguageSection = Field(default_factory=LanguageSection)
    denoiser: DenoiserSection = Field(default_factory=DenoiserSection)
    executor: ExecutorSection = Field(default_factory=ExecutorSection)
    train: TrainSection = Field(default_factory=TrainSection)
    decode: DecodeSection = Field(default_factory=DecodeSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    verify: VerifySection = Field(default_factory=VerifySection)


def parse_config(data: Optional[Dict[str, Any]]) -> BlockLabConfig:
    try:
        return BlockLabConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"Config failed validation:\n{e}")


def load_config(path: Optional[Union[str, Path]] = None) -> BlockLabConfig:
    """
    Load and validate a YAML config.

    Args:
        path: Config file; defaults to $BLOCKLAB_CONFIG, then configs/config.yaml

    Returns:
        Validated BlockLabConfig

    Raises:
        ConfigError: If the file is missing, not YAML, or fails validation
    """
    path = Path(path or os.getenv("BLOCKLAB_CONFIG", DEFAULT_CONFIG))
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}")
    return parse_config(data)


def config_hash(config: Union[BlockLabConfig, Dict[str, Any]]) -> str:
    """First 12 hex digits of sha256 over the canonical JSON of the resolved config."""
    data = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def get_output_dir() -> Path:
    path = Path(os.getenv("BLOCKLAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
    path.mkdir(parents=True, exist_ok=True)
    return path
