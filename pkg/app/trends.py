"""
Qualitative trends on tiny models and exact oracles.

- block_size_loss_trend: executors with B in {1, 2, 4} trained against a
  pretrained, frozen denoiser under a fixed contiguous 8-token mask on the
  interleaved paired-tokens layout, where 4-token blocks see pairs that
  2-token blocks split
- conditioning_validity_trend: soft and top-1 executors trained on
  paired-tokens and benched through run_experiment with neural models
- topk_mode_trend: oracle decoding of the two-token counterexample with the
  executor unrestricted, top-2 and top-1
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from app.config import DenoiserSection, ExecutorSection, TrainSection, parse_config
from app.experiments import load_language, run_experiment
from app.languages import Corpus, gen_language
from app.models.oracle_models import OracleExecutor, OraclePredictor
from app.models.registry import ModelRegistry, build_denoiser, build_executor, save_checkpoint
from app.training import pretrain_denoiser, smoothed, train_executor
from engine.decoding import SchedulerConfig, generate
from engine.oracle import counterexample_joint, mode_exclusion_witness

log = logging.getLogger(__name__)

TREND_DENOISER = DenoiserSection(d_model=16, n_layers=1, n_heads=2, steps=200, batch_size=32, log_every=1000)
TREND_EXECUTOR = ExecutorSection(d_model=32, n_layers=2, n_heads=4, max_block=4)


def interleaved_corpus(L: int = 16, n_train: int = 2048, n_val: int = 64, seed: int = 0) -> Corpus:
    params = {"n_pairs": 4, "interleave": 1}
    return gen_language("paired-tokens", L, params, seed=seed, n_train=n_train, n_val=n_val)


# ============================================================================
# Loss vs block size
# ============================================================================

@dataclass
class LossTrend:
    final: Dict[int, float]
    denoiser_unchanged: bool

    def ordered(self) -> bool:
        """Smoothed losses never increase with the block size."""
        values = [self.final[B] for B in sorted(self.final)]
        return all(a >= b for a, b in zip(values, values[1:]))


def block_size_loss_trend(
    corpus: Corpus,
    seed: int,
    steps: int = 600,
    window: int = 100,
    block_sizes: Sequence[int] = (1, 2, 4),
    span: int = 8,
    denoiser_section: DenoiserSection = TREND_DENOISER,
    executor_section: ExecutorSection = TREND_EXECUTOR,
) -> LossTrend:
    """
    Final smoothed per-token loss for each block size.

    One denoiser is pretrained per seed and shared, frozen, by every executor.
    """
    vocab, L = corpus.language.vocab, corpus.language.L
    denoiser = build_denoiser(vocab, L, denoiser_section, seed=seed)
    pretrain_denoiser(denoiser, corpus.train, denoiser_section, seed=seed)
    snapshot = {k: v.clone() for k, v in denoiser.state_dict().items()}
    final = {}
    for B in block_sizes:
        cfg = TrainSection(steps=steps, block_size=B, masking="span", span=span, seed=seed,
                           log_every=max(steps, 1))
        executor = build_executor(vocab, executor_section, seed=seed)
        result = train_executor(executor, denoiser, corpus.train, cfg)
        final[B] = float(smoothed(result.losses(), window)[-1])
        log.info("seed %d B=%d: smoothed loss %.4f", seed, B, final[B])
    unchanged = all(torch.equal(v, snapshot[k]) for k, v in denoiser.state_dict().items())
    return LossTrend(final=final, denoiser_unchanged=unchanged)


# ============================================================================
# Soft vs top-1 conditioning
# ============================================================================

def conditioning_validity_trend(
    output_dir: Union[str, Path],
    seed: int,
    block_sizes: Sequence[int] = (2, 4),
    L: int = 8,
    steps: int = 400,
    n_samples: int = 64,
    n_train: int = 2048,
    denoiser_section: DenoiserSection = TREND_DENOISER,
    executor_section: ExecutorSection = TREND_EXECUTOR,
) -> pd.DataFrame:
    """
    Validity of soft- and top-1-conditioned executors decoded with neural models.

    Checkpoints land in output_dir under the names the config's templates
    expect, then run_experiment benches every (B, conditioning) cell.

    Returns:
        One row per cell: seed, B, conditioning, validity_rate, tokens_per_step
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    config = parse_config({
        "language": {
            "kind": "paired-tokens", "L": L, "n_pairs": 4, "n_train": n_train, "n_val": 16, "seed": seed,
        },
        "denoiser": denoiser_section.model_dump(),
        "executor": executor_section.model_dump(),
        "decode": {"predictor": "neural", "executor": "neural", "mode": "static"},
        "bench": {
            "mode": ["static"], "block_size": list(block_sizes), "conditioning": ["soft", "top1"],
            "seeds": [seed], "n_samples": n_samples,
        },
    })
    corpus = load_language(config)
    vocab = corpus.language.vocab
    denoiser = build_denoiser(vocab, L, config.denoiser, seed=seed)
    pretrain_denoiser(denoiser, corpus.train, config.denoiser, seed=seed)
    save_checkpoint(denoiser, output_dir / config.denoiser.checkpoint)
    for B in block_sizes:
        for conditioning in ("soft", "top1"):
            cfg = TrainSection(steps=steps, block_size=B, conditioning=conditioning, seed=seed,
                               log_every=max(steps, 1))
            executor = build_executor(vocab, config.executor, seed=seed)
            train_executor(executor, denoiser, corpus.train, cfg)
            name = config.executor.checkpoint.format(B=B, conditioning=conditioning)
            save_checkpoint(executor, output_dir / name)
    records, _ = run_experiment(config, output_dir=output_dir, registry=ModelRegistry(output_dir))
    return pd.DataFrame([
        {"seed": r.seed, "B": r.B, "conditioning": r.conditioning, "validity_rate": r.validity_rate,
         "tokens_per_step": r.tokens_per_step}
        for r in records
    ])


def soft_beats_top1(frame: pd.DataFrame) -> pd.DataFrame:
    """Soft minus top-1 validity per (seed, B)."""
    wide = frame.pivot_table(index=["seed", "B"], columns="conditioning", values="validity_rate").reset_index()
    wide["margin"] = wide["soft"] - wide["top1"]
    return wide


# ============================================================================
# Mode exclusion under top-k
# ============================================================================

def topk_mode_trend(samples: int, seed: int, topks: Sequence[Optional[int]] = (None, 2, 1)) -> pd.DataFrame:
    q = counterexample_joint()
    predictor, executor = OraclePredictor(q), OracleExecutor(q)
    mode = q.mode()
    rng = np.random.default_rng(seed)
    rows = []
    for topk in topks:
        cfg = SchedulerConfig(mode="static", temperature=1.0, top_p=1.0, topk=topk)
        hits = 0
        for _ in range(samples):
            result = generate([], 2, 2, predictor, executor, cfg, int(rng.integers(0, 2**31 - 1)))
            hits += tuple(int(t) for t in result.tokens) == mode
        excluded = topk is not None and mode_exclusion_witness(q, topk).excluded
        label = "all" if topk is None else str(topk)
        rows.append({"topk": label, "mode_rate": hits / samples, "excluded": excluded})
    return pd.DataFrame(rows)
