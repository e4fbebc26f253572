"""
Block-granular parallel decoding.

Each iteration runs the denoiser on the current sequence, scores the masked
blocks inside the candidate scope by mean entropy and unmasks:
- static: the blocks_per_step lowest-entropy blocks, whole
- dynamic: the longest block prefix whose running mean executor entropy stays
  within tau, or a single denoiser-sampled token when no prefix of length
  two qualifies
- token: the tokens_per_step lowest-entropy positions, each sampled from its
  own marginal (the token-independent baseline)
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import entr

from engine.diffusion import BlockPartition, Vocabulary, check_token_seq, derive_rng
from engine.errors import ContractViolation, StepBudgetExceeded
from engine.interfaces import (
    DEFAULT_TEMPERATURE,
    DEFAULT_TOP_P,
    BlockDecoding,
    BlockExecutor,
    BlockRequest,
    MarginalPredictor,
    check_distribution,
    sample_token,
)
from engine.oracle import frechet_truncate

log = logging.getLogger(__name__)

MODES = ("static", "dynamic", "token")
CONDITIONING = ("soft", "top1")
DEFAULT_SCOPE = 10
BUDGET_FACTOR = 10


@dataclass
class SchedulerConfig:
    """How many tokens to unmask per iteration and how to sample them."""
    mode: str = "static"
    tau: float = 0.2
    scope: int = DEFAULT_SCOPE
    blocks_per_step: int = 1
    tokens_per_step: int = 1
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    greedy: bool = False
    conditioning: str = "soft"
    topk: Optional[int] = None
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.conditioning not in CONDITIONING:
            raise ContractViolation(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        if self.mode == "dynamic" and not self.tau > 0:
            raise ContractViolation(f"tau must be positive in dynamic mode, got {self.tau}")
        if self.scope < 1:
            raise ContractViolation(f"scope must be >= 1, got {self.scope}")
        if self.blocks_per_step < 1 or self.tokens_per_step < 1:
            raise ContractViolation("blocks_per_step and tokens_per_step must be >= 1")
        if self.topk is not None and self.topk < 1:
            raise ContractViolation(f"topk must be >= 1, got {self.topk}")


@dataclass
class TraceEntry:
    iteration: int
    block: int
    k: int
    fallback: bool
    entropy: float
    positions: Tuple[int, ...]
    tokens: Tuple[int, ...]
    # "commit" for model decisions, "eos_fill" for positions closed by EOS termination
    kind: str = "commit"

    def as_row(self) -> Dict[str, Any]:
        """Row for the trace CSV: iter,block,k,fallback,entropy,committed_tokens,kind."""
        return {
            "iter": self.iteration,
            "block": self.block,
            "k": self.k,
            "fallback": int(self.fallback),
            "entropy": self.entropy,
            "committed_tokens": " ".join(str(t) for t in self.tokens),
            "kind": self.kind,
        }


@dataclass
class GenerationState:
    """A partially decoded sequence with pinned prompt positions and its trace."""
    seq: np.ndarray
    part: BlockPartition
    vocab: Vocabulary
    pinned: np.ndarray
    step_count: int = 0
    trace: List[TraceEntry] = field(default_factory=list)
    scopes: List[List[int]] = field(default_factory=list)
    executor_calls: int = 0
    eos_filled: int = 0
    committed: int = 0

    @classmethod
    def start(cls, prompt: Sequence[int], part: BlockPartition, vocab: Vocabulary) -> "GenerationState":
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        if prompt.size:
            prompt = check_token_seq(prompt, vocab)
        if prompt.size > part.L:
            raise ContractViolation(f"Prompt of length {prompt.size} does not fit L={part.L}")
        if np.any(prompt == vocab.mask_id):
            raise ContractViolation("Prompt must not contain MASK")
        seq = np.full(part.L, vocab.mask_id, dtype=np.int64)
        seq[: prompt.size] = prompt
        pinned = np.zeros(part.L, dtype=bool)
        pinned[: prompt.size] = True
        return cls(seq=seq, part=part, vocab=vocab, pinned=pinned)

    @property
    def masked(self) -> np.ndarray:
        return self.seq == self.vocab.mask_id

    @property
    def frontier(self) -> int:
        """Leftmost block containing a MASK, or num_blocks when finished."""
        hits = np.flatnonzero(self.masked)
        return self.part.block_of(int(hits[0])) if hits.size else self.part.num_blocks

    @property
    def done(self) -> bool:
        return not self.masked.any()

    def decoded(self, block: int) -> int:
        """Number of unmasked positions in the block."""
        start, stop = self.part.span(block)
        return int((~self.masked[start:stop]).sum())

    def status(self, block: int) -> str:
        k = self.decoded(block)
        if k == self.part.B:
            return "done"
        return "untouched" if k == 0 else f"partial({k})"

    def next_masked(self, block: int) -> int:
        start, stop = self.part.span(block)
        return start + int(np.flatnonzero(self.masked[start:stop])[0])

    def commit(self, positions: Sequence[int], tokens: Sequence[int]) -> None:
        for pos, tok in zip(positions, tokens):
            if self.pinned[pos]:
                raise ContractViolation(f"Position {pos} is pinned by the prompt")
            if self.seq[pos] != self.vocab.mask_id:
                raise ContractViolation(f"Position {pos} is already unmasked")
            self.seq[pos] = tok
        self.committed += len(positions)


# ============================================================================
# Scoring and selection
# ============================================================================

def entropies(dists: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats."""
    return entr(np.atleast_2d(np.asarray(dists, dtype=np.float64))).sum(axis=-1)


def block_entropy(dists: np.ndarray, k: int) -> float:
    """Mean of the first k per-step entropies."""
    n = np.atleast_2d(dists).shape[0]
    if k < 1 or k > n:
        raise ContractViolation(f"k must be in 1..{n}, got {k}")
    return float(entropies(dists)[:k].mean())


def prefix_means(step_entropies: Sequence[float]) -> np.ndarray:
    """h(k) for k = 1..n."""
    h = np.asarray(step_entropies, dtype=np.float64)
    return np.cumsum(h) / np.arange(1, h.size + 1)


def k_star(step_entropies: Sequence[float], tau: float) -> int:
    """max{k : h(k) <= tau}, or 0 when no prefix qualifies."""
    hits = np.flatnonzero(prefix_means(step_entropies) <= tau)
    return int(hits[-1]) + 1 if hits.size else 0


def candidate_scope(state: GenerationState, scope: int) -> List[int]:
    """The first `scope` blocks at or after the frontier that still contain MASK."""
    out = []
    for block in range(state.frontier, state.part.num_blocks):
        if len(out) >= scope:
            break
        if state.decoded(block) < state.part.B:
            out.append(block)
    return out


def select_static(candidates: Sequence[int], scores: Sequence[float], n: int = 1) -> List[int]:
    """Blocks with the n smallest scores, lower block index first on ties."""
    if not candidates:
        raise ContractViolation("No candidate blocks: generation is already complete")
    ranked = sorted(zip(scores, candidates))
    return [block for _, block in ranked[:n]]


@dataclass
class DynamicChoice:
    block: int
    k: int
    fallback: bool
    entropy: float


def select_dynamic(
    candidates: Sequence[int],
    step_entropies: Sequence[Sequence[float]],
    tau: float,
    dlm_entropies: Sequence[float],
) -> DynamicChoice:
    """
    Pick the block whose longest qualifying prefix is largest.

    step_entropies[i] are the executor entropies for the masked suffix of
    candidates[i]; dlm_entropies[i] is the denoiser entropy of that block's next
    masked position. Ties prefer the smaller h(k*), then the lower block. If the
    best prefix has length <= 1 the choice falls back to one token at the
    lowest-entropy next position.
    """
    if not candidates:
        raise ContractViolation("No candidate blocks: generation is already complete")
    best = None
    for block, ents in zip(candidates, step_entropies):
        k = k_star(ents, tau)
        h = float(prefix_means(ents)[k - 1]) if k else math.inf
        key = (-k, h, block)
        if best is None or key < best[0]:
            best = (key, DynamicChoice(block=block, k=k, fallback=False, entropy=h))
    choice = best[1]
    if choice.k <= 1:
        ent, block = min(zip(dlm_entropies, candidates))
        return DynamicChoice(block=block, k=1, fallback=True, entropy=float(ent))
    return choice


# ============================================================================
# Block execution
# ============================================================================

def run_executor(
    state: GenerationState,
    block: int,
    marginals: np.ndarray,
    executor: BlockExecutor,
    cfg: SchedulerConfig,
    rng: np.random.Generator,
) -> BlockDecoding:
    """Decode the masked suffix of a block without committing anything."""
    start, stop = state.part.span(block)
    k_done = state.decoded(block)
    if np.any(state.masked[start:start + k_done]):
        raise ContractViolation(f"Block {block} is not a decoded prefix followed by MASK")
    support = None
    if cfg.topk is not None:
        support = frechet_truncate(marginals[start + k_done:stop], cfg.topk)
    request = BlockRequest(
        x_t=state.seq.copy(),
        part=state.part,
        block=block,
        marginals=marginals[start:stop],
        prefix=tuple(int(t) for t in state.seq[start:start + k_done]),
        conditioning=cfg.conditioning,
        support=support,
    )
    decoding = executor.decode(request, rng, greedy=cfg.greedy, temperature=cfg.temperature, top_p=cfg.top_p)
    state.executor_calls += decoding.calls
    if len(decoding.tokens) != request.remaining:
        raise ContractViolation(
            f"Executor returned {len(decoding.tokens)} tokens for {request.remaining} masked positions"
        )
    return decoding


def _sanitize(state: GenerationState, block: int, tokens: Sequence[int]) -> List[int]:
    vocab = state.vocab
    out = []
    for tok in tokens:
        tok = int(tok)
        if tok < 0 or tok >= vocab.size or tok == vocab.mask_id:
            raise ContractViolation(f"Executor emitted invalid token {tok} in block {block}")
        if tok in (vocab.bot_id, vocab.eot_id):
            log.warning("Boundary token %s emitted inside block %d; replaced by EOS", vocab.label(tok), block)
            tok = vocab.eos_id
        out.append(tok)
    return out


def commit_block(
    state: GenerationState, block: int, decoding: BlockDecoding, k: int, fallback: bool, entropy: float
) -> TraceEntry:
    """Commit the first k decoded tokens of a block's masked suffix."""
    pos = state.next_masked(block)
    tokens = _sanitize(state, block, decoding.tokens[:k])
    positions = tuple(range(pos, pos + len(tokens)))
    state.commit(positions, tokens)
    entry = TraceEntry(state.step_count, block, len(tokens), fallback, float(entropy), positions, tuple(tokens))
    state.trace.append(entry)
    return entry


def decode_block(
    state: GenerationState,
    block: int,
    k: int,
    predictor: MarginalPredictor,
    executor: BlockExecutor,
    cfg: SchedulerConfig,
    rng: np.random.Generator,
    marginals: Optional[np.ndarray] = None,
) -> BlockDecoding:
    """Run the denoiser and executor on one block and commit its next k tokens."""
    if marginals is None:
        marginals = check_distribution(predictor.predict(state.seq.copy()), state.vocab)
    decoding = run_executor(state, block, marginals, executor, cfg, rng)
    ent = block_entropy(decoding.dists, k) if len(decoding.dists) else 0.0
    commit_block(state, block, decoding, k, False, ent)
    return decoding


def apply_eos_termination(state: GenerationState) -> int:
    """
    Fill with EOS every MASK after the first committed EOS at or before the frontier.

    Returns the number of positions filled.
    """
    eos = np.flatnonzero(state.seq == state.vocab.eos_id)
    if not eos.size or state.part.block_of(int(eos[0])) > state.frontier:
        return 0
    after = state.masked.copy()
    after[: eos[0] + 1] = False
    filled = int(after.sum())
    if filled:
        positions = tuple(int(p) for p in np.flatnonzero(after))
        state.seq[after] = state.vocab.eos_id
        state.eos_filled += filled
        state.trace.append(TraceEntry(
            state.step_count, state.part.block_of(positions[0]), filled, False, 0.0, positions,
            (state.vocab.eos_id,) * filled, kind="eos_fill",
        ))
        log.debug("EOS at position %d filled %d trailing positions", int(eos[0]), filled)
    return filled


# ============================================================================
# Iterations
# ============================================================================

def _step_static(state, candidates, marginals, executor, cfg, rng) -> None:
    dlm_ent = entropies(marginals)
    scores = []
    for block in candidates:
        start, stop = state.part.span(block)
        scores.append(float(dlm_ent[start:stop][state.masked[start:stop]].mean()))
    score_of = dict(zip(candidates, scores))
    for block in select_static(candidates, scores, cfg.blocks_per_step):
        decoding = run_executor(state, block, marginals, executor, cfg, rng)
        commit_block(state, block, decoding, len(decoding.tokens), False, score_of[block])


def _step_dynamic(state, candidates, marginals, executor, cfg, rng) -> None:
    dlm_ent = entropies(marginals)
    decodings, step_ents, next_ents = [], [], []
    for block in candidates:
        decoding = run_executor(state, block, marginals, executor, cfg, rng)
        decodings.append(decoding)
        step_ents.append(entropies(decoding.dists))
        next_ents.append(float(dlm_ent[state.next_masked(block)]))
    choice = select_dynamic(candidates, step_ents, cfg.tau, next_ents)
    if choice.fallback:
        pos = state.next_masked(choice.block)
        tok = sample_token(marginals[pos], rng)
        fallback = BlockDecoding(tokens=[tok], dists=marginals[pos:pos + 1], calls=0)
        commit_block(state, choice.block, fallback, 1, True, choice.entropy)
    else:
        decoding = decodings[candidates.index(choice.block)]
        commit_block(state, choice.block, decoding, choice.k, False, choice.entropy)


def _step_token(state, candidates, marginals, cfg, rng) -> None:
    dlm_ent = entropies(marginals)
    pool = []
    for block in candidates:
        start, stop = state.part.span(block)
        pool.extend(pos for pos in range(start, stop) if state.masked[pos])
    pool.sort(key=lambda pos: (round(float(dlm_ent[pos]), 12), pos))
    for pos in sorted(pool[: cfg.tokens_per_step]):
        tok = sample_token(marginals[pos], rng)
        state.commit([pos], [tok])
        state.trace.append(
            TraceEntry(state.step_count, state.part.block_of(pos), 1, False, float(dlm_ent[pos]), (pos,), (tok,))
        )


@dataclass
class GenerationResult:
    tokens: np.ndarray
    state: GenerationState
    stats: Dict[str, float]

    @property
    def trace(self) -> List[TraceEntry]:
        return self.state.trace


def iteration_budget(L: int, B: int, cfg: SchedulerConfig) -> int:
    if cfg.max_iterations is not None:
        return cfg.max_iterations
    return max(BUDGET_FACTOR * L // B, L)


def generate(
    prompt: Sequence[int],
    L: int,
    B: int,
    predictor: MarginalPredictor,
    executor: Optional[BlockExecutor],
    cfg: SchedulerConfig,
    seed: int,
) -> GenerationResult:
    """
    Decode a length-L sequence after a pinned prompt.

    Deterministic given seed. Raises StepBudgetExceeded (carrying the partial
    state) if the iteration cap is hit before every position is unmasked.
    """
    vocab = predictor.vocab
    part = BlockPartition(L, B)
    state = GenerationState.start(prompt, part, vocab)
    if executor is None and cfg.mode != "token":
        raise ContractViolation(f"mode={cfg.mode} needs a block executor")
    rng = derive_rng(seed, 0)
    budget = iteration_budget(L, B, cfg)
    started = time.perf_counter()
    generated_start = int(state.masked.sum())

    while not state.done:
        if state.step_count >= budget:
            raise StepBudgetExceeded(
                f"Generation stopped after {state.step_count} iterations with {int(state.masked.sum())} masks left",
                state=state,
            )
        before = int(state.masked.sum())
        candidates = candidate_scope(state, cfg.scope)
        state.scopes.append(list(candidates))
        marginals = check_distribution(predictor.predict(state.seq.copy()), vocab)
        if cfg.mode == "static":
            _step_static(state, candidates, marginals, executor, cfg, rng)
        elif cfg.mode == "dynamic":
            _step_dynamic(state, candidates, marginals, executor, cfg, rng)
        else:
            _step_token(state, candidates, marginals, cfg, rng)
        apply_eos_termination(state)
        state.step_count += 1
        if int(state.masked.sum()) >= before:
            raise ContractViolation(f"Iteration {state.step_count} made no progress")

    steps = max(state.step_count, 1)
    decisions = [e.entropy for e in state.trace if e.kind == "commit"]
    mean_entropy = float(np.mean(decisions)) if decisions else 0.0
    stats = {
        "tokens_per_step": generated_start / steps,
        "steps": state.step_count,
        "executor_calls": state.executor_calls,
        "executor_calls_per_token": state.executor_calls / max(generated_start, 1),
        "eos_filled": state.eos_filled,
        "mean_entropy": mean_entropy,
        "wall_time": time.perf_counter() - started,
    }
    log.debug("Generated %d positions in %d iterations", generated_start, state.step_count)
    return GenerationResult(tokens=state.seq.copy(), state=state, stats=stats)
