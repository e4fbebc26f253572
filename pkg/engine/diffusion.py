"""
Absorbing-state (masked) discrete diffusion primitives.

Provides:
- Vocabulary / NoiseSchedule / BlockPartition value types
- forward_marginal, one_step_kernel, posterior_step: the closed-form kernels
- loss_weight: the per-masked-position cross-entropy weight
- sample_block_masking / sample_token_masking / sample_span_masking: the
  training-time corruption samplers
- derive_rng: splittable random streams derived from a single seed
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from engine.errors import ContractViolation

Categorical = Dict[int, float]
RngLike = Union[int, np.random.Generator]

MASK_EPS = 1e-3
TRAIN_T_RANGE = (0.2, 0.8)
ALPHA_TOL = 1e-12


# ============================================================================
# Random streams
# ============================================================================

def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Derive an independent numpy Generator from a run seed and a key path.

    The same (seed, keys) always yields the same stream, and distinct key
    paths yield statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def as_rng(rng: RngLike) -> np.random.Generator:
    """Accept either a seed or an existing Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a seed for torch from a numpy stream."""
    return int(rng.integers(0, 2**62))


# ============================================================================
# Value types
# ============================================================================

@dataclass(frozen=True)
class Vocabulary:
    """Token alphabet with the reserved MASK / EOS / boundary symbols."""
    size: int
    mask_id: int
    eos_id: int
    bot_id: int
    eot_id: int
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        reserved = (self.mask_id, self.eos_id, self.bot_id, self.eot_id)
        if self.size < 5:
            raise ContractViolation(
                f"Vocabulary needs at least one content token besides the 4 reserved ones, got size={self.size}"
            )
        if len(set(reserved)) != 4:
            raise ContractViolation(f"Reserved token ids must be distinct, got {reserved}")
        if any(r < 0 or r >= self.size for r in reserved):
            raise ContractViolation(f"Reserved token ids {reserved} out of range for size {self.size}")
        if self.labels is not None and len(self.labels) != self.size:
            raise ContractViolation(f"Expected {self.size} labels, got {len(self.labels)}")

    @classmethod
    def with_content(cls, n_content: int, content_labels: Optional[Sequence[str]] = None) -> "Vocabulary":
        """Content tokens take ids 0..n-1; MASK, EOS, <bot>, <eot> follow."""
        labels = None
        if content_labels is not None:
            if len(content_labels) != n_content:
                raise ContractViolation(f"Expected {n_content} content labels, got {len(content_labels)}")
            labels = tuple(content_labels) + ("[MASK]", "<eos>", "<think>", "</think>")
        return cls(
            size=n_content + 4,
            mask_id=n_content,
            eos_id=n_content + 1,
            bot_id=n_content + 2,
            eot_id=n_content + 3,
            labels=labels,
        )

    @property
    def reserved_ids(self) -> Tuple[int, ...]:
        return (self.mask_id, self.eos_id, self.bot_id, self.eot_id)

    @property
    def content_ids(self) -> Tuple[int, ...]:
        reserved = set(self.reserved_ids)
        return tuple(i for i in range(self.size) if i not in reserved)

    @property
    def output_ids(self) -> Tuple[int, ...]:
        """Tokens a model may emit: content tokens plus EOS."""
        return tuple(sorted(self.content_ids + (self.eos_id,)))

    @property
    def forbidden_output_ids(self) -> Tuple[int, ...]:
        return (self.mask_id, self.bot_id, self.eot_id)

    def label(self, token: int) -> str:
        if self.labels is not None:
            return self.labels[token]
        if token == self.mask_id:
            return "M"
        if token == self.eos_id:
            return "<eos>"
        return str(token)

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.label(int(t)) for t in tokens)

    def to_config(self) -> Dict[str, Any]:
        return {
            "size": self.size,
            "mask_id": self.mask_id,
            "eos_id": self.eos_id,
            "bot_id": self.bot_id,
            "eot_id": self.eot_id,
            "labels": list(self.labels) if self.labels is not None else None,
        }

    @classmethod
    def from_config(cls, data: Dict[str, Any]) -> "Vocabulary":
        labels = data.get("labels")
        return cls(
            size=int(data["size"]),
            mask_id=int(data["mask_id"]),
            eos_id=int(data["eos_id"]),
            bot_id=int(data["bot_id"]),
            eot_id=int(data["eot_id"]),
            labels=tuple(labels) if labels is not None else None,
        )


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-step masking rates beta[1..T] and cumulative survival alpha_bar[0..T].

    beta is stored 0-indexed (beta[t-1] is β_t); alpha_bar[0] = 1.
    """
    T: int
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ContractViolation(f"Schedule needs T >= 1, got {self.T}")
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T + 1,):
            raise ContractViolation("beta must have length T and alpha_bar length T+1")
        if np.any(self.beta < 0) or np.any(self.beta > 1):
            raise ContractViolation(f"beta must lie in [0, 1], got {self.beta.tolist()}")
        if abs(self.alpha_bar[0] - 1.0) > ALPHA_TOL or abs(self.alpha_bar[-1]) > ALPHA_TOL:
            raise ContractViolation(
                f"Schedule must satisfy alpha_0 = 1 and alpha_T = 0, got "
                f"alpha_0={self.alpha_bar[0]!r}, alpha_T={self.alpha_bar[-1]!r}"
            )
        if np.any(np.diff(self.alpha_bar) > ALPHA_TOL):
            raise ContractViolation("alpha_bar must be nonincreasing")

    @classmethod
    def linear_alpha(cls, T: int) -> "NoiseSchedule":
        """alpha_t = 1 - t/T, hence beta_t = 1/(T - t + 1)."""
        if T < 1:
            raise ContractViolation(f"Schedule needs T >= 1, got {T}")
        t = np.arange(1, T + 1, dtype=np.float64)
        beta = 1.0 / (T - t + 1.0)
        return cls.from_beta(beta)

    @classmethod
    def from_beta(cls, beta: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return cls(T=len(beta), beta=beta, alpha_bar=alpha_bar)

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "NoiseSchedule":
        """Build from a config section: T, schedule = linear-alpha | explicit, beta."""
        kind = section.get("schedule", "linear-alpha")
        if kind == "linear-alpha":
            return cls.linear_alpha(int(section["T"]))
        if kind == "explicit":
            beta = section.get("beta")
            if beta is None:
                raise ContractViolation("explicit schedule requires a beta list")
            sched = cls.from_beta(beta)
            if "T" in section and int(section["T"]) != sched.T:
                raise ContractViolation(f"T={section['T']} does not match len(beta)={sched.T}")
            return sched
        raise ContractViolation(f"Unknown schedule kind: {kind}")

    def to_config(self) -> Dict[str, Any]:
        return {"T": self.T, "schedule": "explicit", "beta": self.beta.tolist()}

    def alpha(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ContractViolation(f"Step t={t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def _check_step(self, t: int) -> None:
        if t < 1 or t > self.T:
            raise ContractViolation(f"Step t={t} outside [1, {self.T}]")


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint blocks of size B covering L positions."""
    L: int
    B: int

    def __post_init__(self):
        if self.B < 1 or self.L < 1:
            raise ContractViolation(f"Block size and length must be positive, got L={self.L}, B={self.B}")
        if self.L % self.B != 0:
            raise ContractViolation(f"Block size B={self.B} does not divide sequence length L={self.L}")

    @property
    def num_blocks(self) -> int:
        return self.L // self.B

    def span(self, block: int) -> Tuple[int, int]:
        """Half-open position range [start, stop) of a block."""
        if block < 0 or block >= self.num_blocks:
            raise ContractViolation(f"Block {block} outside [0, {self.num_blocks})")
        return block * self.B, (block + 1) * self.B

    def positions(self, block: int) -> range:
        start, stop = self.span(block)
        return range(start, stop)

    def block_of(self, position: int) -> int:
        if position < 0 or position >= self.L:
            raise ContractViolation(f"Position {position} outside [0, {self.L})")
        return position // self.B


def check_token_seq(tokens: Sequence[int], vocab: Vocabulary, part: Optional[BlockPartition] = None) -> np.ndarray:
    """Validate a token sequence and return it as an int64 array."""
    seq = np.asarray(tokens, dtype=np.int64)
    if seq.ndim != 1 or seq.size == 0:
        raise ContractViolation(f"Token sequence must be a non-empty 1-d array, got shape {seq.shape}")
    if np.any(seq < 0) or np.any(seq >= vocab.size):
        raise ContractViolation(f"Token ids must lie in [0, {vocab.size}), got {seq.tolist()}")
    if part is not None and seq.size != part.L:
        raise ContractViolation(f"Sequence length {seq.size} does not match partition length {part.L}")
    return seq


# ============================================================================
# Closed-form kernels
# ============================================================================

def forward_marginal(x0_tok: int, t: int, sched: NoiseSchedule, vocab: Vocabulary) -> Categorical:
    """q(x_t | x_0) = alpha_t on x_0 and 1 - alpha_t on MASK."""
    sched._check_step(t)
    if x0_tok == vocab.mask_id:
        raise ContractViolation("The forward process never starts from MASK")
    a = sched.alpha(t)
    return {int(x0_tok): a, vocab.mask_id: 1.0 - a}


def one_step_kernel(x_prev_tok: int, t: int, sched: NoiseSchedule, vocab: Vocabulary) -> Categorical:
    """q(x_t | x_{t-1}): keep with 1 - beta_t, absorb with beta_t; MASK stays MASK."""
    beta = sched.beta_at(t)
    if x_prev_tok == vocab.mask_id:
        return {vocab.mask_id: 1.0}
    return {int(x_prev_tok): 1.0 - beta, vocab.mask_id: beta}


def posterior_step(x_t_tok: int, x0_tok: int, t: int, sched: NoiseSchedule, vocab: Vocabulary) -> Categorical:
    """
    q(x_{t-1} | x_t, x_0) for the absorbing process.

    An unmasked x_t is pinned. A masked x_t reverts to x_0 with
    (alpha_{t-1} - alpha_t) / (1 - alpha_t) and stays masked otherwise.
    """
    sched._check_step(t)
    if x0_tok == vocab.mask_id:
        raise ContractViolation("x_0 can never be MASK")
    if x_t_tok != vocab.mask_id:
        if x_t_tok != x0_tok:
            raise ContractViolation(f"Inconsistent posterior input: x_t={x_t_tok} is unmasked but x_0={x0_tok}")
        return {int(x0_tok): 1.0}
    a_prev, a_t = sched.alpha(t - 1), sched.alpha(t)
    denom = 1.0 - a_t
    if denom <= 0.0:
        raise ContractViolation(f"x_t is MASK at step t={t}, where alpha_t = 1 and nothing can be masked")
    return {int(x0_tok): (a_prev - a_t) / denom, vocab.mask_id: (1.0 - a_prev) / denom}


def loss_weight(t: int, sched: NoiseSchedule) -> float:
    """(alpha_{t-1} - alpha_t) / (1 - alpha_t), the weight of each masked position at step t."""
    sched._check_step(t)
    a_prev, a_t = sched.alpha(t - 1), sched.alpha(t)
    if a_t >= 1.0:
        raise ContractViolation(f"loss_weight undefined at t={t}: alpha_t = 1")
    return (a_prev - a_t) / (1.0 - a_t)


def mask_level(u: float, eps: float = MASK_EPS) -> float:
    """Continuous masking probability (1 - eps) * u + eps."""
    return (1.0 - eps) * float(u) + eps


def continuous_loss_weight(p_mask: float) -> float:
    """Continuous-time limit of loss_weight for the linear-alpha schedule."""
    if p_mask <= 0.0:
        raise ContractViolation(f"Mask level must be positive, got {p_mask}")
    return 1.0 / p_mask


# ============================================================================
# Corruption samplers
# ============================================================================

@dataclass
class BlockMasking:
    """Result of a block-masking draw."""
    masked: np.ndarray
    block_mask: np.ndarray
    drawn: np.ndarray
    p_mask: float
    t: Optional[float]
    fallback: bool


def sample_block_masking(
    x0: Sequence[int],
    part: BlockPartition,
    vocab: Vocabulary,
    rng: RngLike,
    t: Optional[float] = None,
    p_mask: Optional[float] = None,
    t_range: Tuple[float, float] = TRAIN_T_RANGE,
    eps: float = MASK_EPS,
) -> BlockMasking:
    """
    Mask whole blocks independently with probability p_mask.

    p_mask = (1 - eps) t + eps with t ~ U(t_range) unless t or p_mask is given.
    If no block is drawn, one block chosen uniformly at random is masked.
    """
    seq = check_token_seq(x0, vocab, part)
    if np.any(seq == vocab.mask_id):
        raise ContractViolation("sample_block_masking expects a clean sequence without MASK tokens")
    gen = as_rng(rng)
    if p_mask is None:
        if t is None:
            t = float(gen.uniform(*t_range))
        p_mask = mask_level(t, eps)
    drawn = gen.random(part.num_blocks) < p_mask
    block_mask = drawn.copy()
    fallback = not block_mask.any()
    if fallback:
        block_mask[int(gen.integers(part.num_blocks))] = True
    masked = seq.copy()
    masked[np.repeat(block_mask, part.B)] = vocab.mask_id
    return BlockMasking(masked=masked, block_mask=block_mask, drawn=drawn, p_mask=float(p_mask), t=t, fallback=fallback)


def sample_token_masking(
    x0: np.ndarray, vocab: Vocabulary, rng: RngLike, p_mask: Optional[float] = None, eps: float = MASK_EPS
) -> Tuple[np.ndarray, float]:
    """Token-level masking of a batch (..., L); returns (masked, p_mask)."""
    gen = as_rng(rng)
    if p_mask is None:
        p_mask = mask_level(gen.uniform(0.0, 1.0), eps)
    x0 = np.asarray(x0, dtype=np.int64)
    hit = gen.random(x0.shape) < p_mask
    return np.where(hit, vocab.mask_id, x0), float(p_mask)


def sample_span_masking(x0: np.ndarray, vocab: Vocabulary, span: int, rng: RngLike) -> Tuple[np.ndarray, float]:
    """
    Mask one contiguous span per row, starting at a multiple of the span.

    Returns (masked, p_mask) where p_mask = span / L.
    """
    gen = as_rng(rng)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    L = x0.shape[-1]
    if span < 1 or L % span != 0:
        raise ContractViolation(f"Span {span} must divide sequence length {L}")
    masked = x0.copy()
    starts = gen.integers(0, L // span, size=x0.shape[0]) * span
    for row, start in enumerate(starts):
        masked[row, start:start + span] = vocab.mask_id
    return masked, span / L


def masked_blocks(masked: np.ndarray, part: BlockPartition, vocab: Vocabulary) -> List[int]:
    """Indices of fully masked blocks; a partially masked block is a contract violation."""
    blocks = []
    for b in range(part.num_blocks):
        start, stop = part.span(b)
        hits = masked[start:stop] == vocab.mask_id
        if hits.all():
            blocks.append(b)
        elif hits.any():
            raise ContractViolation(f"Block {b} is only partially masked: {masked[start:stop].tolist()}")
    return blocks
