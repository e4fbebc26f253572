"""
Training for the tiny models.

- block_loss: soft-conditioned executor cross-entropy on fully masked blocks
- train_executor: AdamW + warmup/cosine + clipping with a frozen denoiser
- pretrain_denoiser: token-level masked cross-entropy for the denoiser
- finite_difference_check: central differences vs autograd on random coordinates
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from app.config import DenoiserSection, TrainSection
from app.models.denoiser import TinyDenoiser
from app.models.executor import TinyARExecutor
from engine.diffusion import (
    BlockPartition,
    Vocabulary,
    continuous_loss_weight,
    derive_rng,
    sample_block_masking,
    sample_span_masking,
    sample_token_masking,
    torch_seed,
)
from engine.errors import ContractViolation, TrainingDiverged

log = logging.getLogger(__name__)

RECENT_LOSSES = 10
GRAD_FLOOR = 1e-5


@dataclass
class LossRecord:
    step: int
    loss: float
    mask_level: float


@dataclass
class TrainResult:
    curve: List[LossRecord]
    val_curve: List[LossRecord] = field(default_factory=list)
    best_step: Optional[int] = None
    best_val: Optional[float] = None
    best_state: Optional[Dict[str, torch.Tensor]] = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.curve], dtype=np.float64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"step": [r.step for r in self.curve], "loss": [r.loss for r in self.curve],
             "mask_level": [r.mask_level for r in self.curve]}
        )

    def save_curve(self, path: Union[str, Path]) -> None:
        """CSV with columns step,loss,mask_level."""
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; early entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (cumulative[idx] - cumulative[lo]) / (idx - lo)


# ============================================================================
# Block loss
# ============================================================================

def masked_block_index(masked: torch.Tensor, part: BlockPartition, vocab: Vocabulary) -> torch.Tensor:
    """Boolean (N, num_blocks) of fully masked blocks; partial blocks are rejected."""
    hits = (masked == vocab.mask_id).reshape(masked.shape[0], part.num_blocks, part.B)
    full, any_hit = hits.all(dim=-1), hits.any(dim=-1)
    if torch.any(full != any_hit):
        raise ContractViolation("Block loss needs whole-block masking; found a partially masked block")
    return full


def block_loss(
    denoiser: TinyDenoiser,
    executor: TinyARExecutor,
    x0: torch.Tensor,
    masked: torch.Tensor,
    part: BlockPartition,
    mask_level: Optional[Union[float, torch.Tensor]] = None,
    weight: Optional[Union[float, torch.Tensor]] = None,
    conditioning: str = "soft",
    return_count: bool = False,
):
    """
    Weighted sum over masked blocks of the executor's teacher-forced NLL.

    Args:
        x0: clean sequences (N, L) or (L,)
        masked: same shape, whole blocks replaced by MASK
        mask_level: masking probability; the weight defaults to 1 / mask_level
        weight: explicit per-row or scalar weight, overrides mask_level

    Returns:
        Scalar loss (and the number of masked tokens when return_count)
    """
    vocab = executor.vocab
    x0, masked = torch.atleast_2d(x0), torch.atleast_2d(masked)
    blocks = masked_block_index(masked, part, vocab)
    n_blocks = int(blocks.sum())
    if n_blocks == 0:
        raise ContractViolation("No masked block in the batch")
    if weight is None:
        if mask_level is None:
            raise ContractViolation("block_loss needs a mask_level or an explicit weight")
        weight = 1.0 / torch.as_tensor(mask_level, dtype=torch.float64)
    row_weight = torch.as_tensor(weight, dtype=executor.E.dtype).expand(x0.shape[0])

    with torch.no_grad():
        pi = denoiser.marginals(masked).to(executor.E.dtype)
    pi = pi.reshape(x0.shape[0], part.num_blocks, part.B, -1)[blocks]
    targets = x0.reshape(x0.shape[0], part.num_blocks, part.B)[blocks]
    block_weight = row_weight.unsqueeze(1).expand(-1, part.num_blocks)[blocks]

    prompt = executor.prompt(pi, conditioning)
    nll = -executor.teacher_forced_logprobs(prompt, targets).sum(dim=-1)
    loss = (nll * block_weight).sum()
    if return_count:
        return loss, n_blocks * part.B
    return loss


# ============================================================================
# Optimizer and data
# ============================================================================

def warmup_cosine(total_steps: int, warmup_ratio: float) -> Callable[[int], float]:
    warmup = int(math.ceil(warmup_ratio * total_steps))

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(total_steps - warmup, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return factor


def make_optimizer(params, lr: float, weight_decay: float, steps: int, warmup_ratio: float):
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, warmup_cosine(steps, warmup_ratio))
    return optimizer, scheduler


def corrupt(x0: np.ndarray, part: BlockPartition, vocab: Vocabulary, cfg: TrainSection,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Masked copies of a batch and the per-row mask level."""
    if cfg.masking == "span":
        if cfg.span % part.B:
            raise ContractViolation(f"Span {cfg.span} must be a multiple of the block size {part.B}")
        masked, level = sample_span_masking(x0, vocab, cfg.span, rng)
        return masked, np.full(x0.shape[0], level)
    rows, levels = [], []
    for row in x0:
        draw = sample_block_masking(row, part, vocab, rng)
        rows.append(draw.masked)
        levels.append(draw.p_mask)
    return np.stack(rows), np.array(levels)


def continuous_loss_weight_vec(levels: np.ndarray) -> np.ndarray:
    return np.array([continuous_loss_weight(p) for p in levels])


def _diverged(step: int, loss: float, curve: List[LossRecord]) -> TrainingDiverged:
    recent = [r.loss for r in curve[-RECENT_LOSSES:]]
    return TrainingDiverged(f"Non-finite loss {loss} at step {step}; recent losses {recent}", step, recent)


def _validation_loss(denoiser, executor, val, part, cfg, seed) -> float:
    rng = derive_rng(seed, 3)
    masked, levels = corrupt(val, part, executor.vocab, cfg, rng)
    with torch.no_grad():
        loss, count = block_loss(
            denoiser, executor, torch.as_tensor(val), torch.as_tensor(masked), part,
            weight=torch.as_tensor(continuous_loss_weight_vec(levels)), conditioning=cfg.conditioning,
            return_count=True,
        )
    return float(loss) / count


def train_executor(
    executor: TinyARExecutor,
    denoiser: TinyDenoiser,
    train: np.ndarray,
    cfg: TrainSection,
    val: Optional[np.ndarray] = None,
) -> TrainResult:
    """
    Train the executor against a frozen denoiser.

    Each optimizer step accumulates grad_accum micro-batches of micro_batch
    sequences. The logged loss is the weighted block loss per masked token.
    Deterministic given cfg.seed.
    """
    part = BlockPartition(train.shape[1], cfg.block_size)
    vocab = executor.vocab
    denoiser.eval()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    rng = derive_rng(cfg.seed, 4)
    torch.manual_seed(torch_seed(rng))
    optimizer, scheduler = make_optimizer(
        executor.parameters(), cfg.lr, cfg.weight_decay, cfg.steps, cfg.warmup_ratio
    )
    result = TrainResult(curve=[])
    executor.train()
    for step in range(cfg.steps):
        optimizer.zero_grad()
        total, tokens, level_sum = 0.0, 0, 0.0
        for _ in range(cfg.grad_accum):
            batch = train[rng.integers(0, train.shape[0], size=cfg.micro_batch)]
            masked, levels = corrupt(batch, part, vocab, cfg, rng)
            loss, count = block_loss(
                denoiser, executor, torch.as_tensor(batch), torch.as_tensor(masked), part,
                weight=torch.as_tensor(continuous_loss_weight_vec(levels)), conditioning=cfg.conditioning,
                return_count=True,
            )
            (loss / (cfg.micro_batch * cfg.grad_accum)).backward()
            total += float(loss)
            tokens += count
            level_sum += float(levels.mean())
        value = total / tokens
        if not math.isfinite(value):
            raise _diverged(step, value, result.curve)
        torch.nn.utils.clip_grad_norm_(executor.parameters(), cfg.max_grad_norm)
        optimizer.step()
        scheduler.step()
        result.curve.append(LossRecord(step=step, loss=value, mask_level=level_sum / cfg.grad_accum))
        if step % cfg.log_every == 0:
            log.info("executor step %d loss %.4f lr %.2e", step, value, scheduler.get_last_lr()[0])
        if val is not None and ((step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps):
            executor.eval()
            val_loss = _validation_loss(denoiser, executor, val, part, cfg, cfg.seed)
            executor.train()
            result.val_curve.append(LossRecord(step=step, loss=val_loss, mask_level=float("nan")))
            if result.best_val is None or val_loss < result.best_val:
                result.best_val, result.best_step = val_loss, step
                result.best_state = copy.deepcopy(executor.state_dict())
    executor.eval()
    return result


def pretrain_denoiser(denoiser: TinyDenoiser, train: np.ndarray, cfg: DenoiserSection, seed: int = 0) -> TrainResult:
    """Token-level masked cross-entropy weighted by 1/p_mask and normalized by L."""
    vocab = denoiser.vocab
    rng = derive_rng(seed, 5)
    torch.manual_seed(torch_seed(rng))
    optimizer, scheduler = make_optimizer(denoiser.parameters(), cfg.lr, 0.0, cfg.steps, 0.03)
    result = TrainResult(curve=[])
    denoiser.train()
    L = train.shape[1]
    for step in range(cfg.steps):
        batch = train[rng.integers(0, train.shape[0], size=cfg.batch_size)]
        masked, p_mask = sample_token_masking(batch, vocab, rng)
        x0, x_t = torch.as_tensor(batch), torch.as_tensor(masked)
        logits = denoiser(x_t)
        ce = F.cross_entropy(logits.reshape(-1, vocab.size), x0.reshape(-1), reduction="none")
        hit = (x_t == vocab.mask_id).reshape(-1).to(ce.dtype)
        loss = (ce * hit).sum() * continuous_loss_weight(p_mask) / (L * batch.shape[0])
        value = float(loss)
        if not math.isfinite(value):
            raise _diverged(step, value, result.curve)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(denoiser.parameters(), 7.0)
        optimizer.step()
        scheduler.step()
        result.curve.append(LossRecord(step=step, loss=value, mask_level=p_mask))
        if step % cfg.log_every == 0:
            log.info("denoiser step %d loss %.4f", step, value)
    denoiser.eval()
    return result


# ============================================================================
# Gradient check
# ============================================================================

@dataclass
class GradientCheck:
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def relative_errors(self) -> np.ndarray:
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), GRAD_FLOOR)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_errors.max())


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.nn.Parameter],
    n_coords: int,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> GradientCheck:
    """Compare autograd with central differences on n_coords random parameter entries."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    analytic, numeric = [], []
    for _ in range(n_coords):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[which].data.view(-1)
        idx = int(rng.integers(0, flat.numel()))
        analytic.append(float(params[which].grad.view(-1)[idx]))
        original = flat[idx].item()
        with torch.no_grad():
            flat[idx] = original + eps
            plus = float(loss_fn())
            flat[idx] = original - eps
            minus = float(loss_fn())
            flat[idx] = original
        numeric.append((plus - minus) / (2 * eps))
    return GradientCheck(analytic=np.array(analytic), numeric=np.array(numeric))
