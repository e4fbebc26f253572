"""
Exact oracle over an explicit joint distribution of short sequences.

Everything here is computed by enumeration, in nats:
- conditional_marginal / block_conditional: exact reverse-process conditionals
- nelbo_bound / nelbo_gap: smallest achievable NELBO under block independence
  and its reduction relative to token independence
- kl_closed_form_check: the cross-entropy form of the per-step KL against a
  brute-force sum over x_{t-1}
- frechet_truncate / mode_exclusion_witness: top-k support restriction and
  the global-mode exclusion counterexample
"""

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr

from engine.diffusion import (
    BlockPartition,
    NoiseSchedule,
    Vocabulary,
    check_token_seq,
    loss_weight,
    posterior_step,
)
from engine.errors import ContractViolation, IntractableInstance, UnreachableEvidence

log = logging.getLogger(__name__)

MAX_JOINT_SPACE = 10**6
MAX_TRANSITION_ROWS = 5 * 10**6
MAX_PRODUCT_SUPPORT = 10**5
PROB_TOL = 1e-12
RANK_DECIMALS = 12

COUNTEREXAMPLE_LABELS = ("Roger", "Houston", "You", "I", "They")


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats of a probability vector."""
    return float(entr(np.asarray(p, dtype=np.float64)).sum())


def _grouped_entropy(keys: np.ndarray, weights: np.ndarray) -> float:
    """Entropy of the distribution obtained by summing weights per key."""
    _, inverse = np.unique(keys, return_inverse=True)
    return entropy(np.bincount(inverse.ravel(), weights=weights))


def _encode(rows: np.ndarray, base: int) -> np.ndarray:
    """Encode each row of small integers as one int64 key."""
    powers = base ** np.arange(rows.shape[-1] - 1, -1, -1, dtype=np.int64)
    return rows.astype(np.int64) @ powers


# ============================================================================
# Tabular joint
# ============================================================================

class TabularJoint:
    """An explicit joint distribution q(x_0) over length-L content sequences."""

    def __init__(self, vocab: Vocabulary, L: int, probs: Dict[Tuple[int, ...], float]):
        space = len(vocab.output_ids) ** L
        if space > MAX_JOINT_SPACE:
            raise IntractableInstance(
                f"Joint over {len(vocab.output_ids)} emittable tokens and L={L} has {space} sequences "
                f"(limit {MAX_JOINT_SPACE})"
            )
        forbidden = set(vocab.forbidden_output_ids)
        seqs, weights = [], []
        for seq, p in probs.items():
            seq = tuple(int(s) for s in seq)
            if len(seq) != L:
                raise ContractViolation(f"Sequence {seq} has length {len(seq)}, expected {L}")
            if any(s < 0 or s >= vocab.size or s in forbidden for s in seq):
                raise ContractViolation(f"Sequence {seq} contains MASK, a boundary token or an invalid id")
            if p < 0:
                raise ContractViolation(f"Negative probability {p} for {seq}")
            if p > 0:
                seqs.append(seq)
                weights.append(float(p))
        total = float(np.sum(weights)) if weights else 0.0
        if abs(total - 1.0) > PROB_TOL:
            raise ContractViolation(f"Probabilities sum to {total!r}, expected 1 within {PROB_TOL}")
        order = sorted(range(len(seqs)), key=lambda i: seqs[i])
        self.vocab = vocab
        self.L = L
        self.seqs = np.array([seqs[i] for i in order], dtype=np.int64).reshape(len(seqs), L)
        self.probs = np.array([weights[i] for i in order], dtype=np.float64)
        self.seqs.setflags(write=False)
        self.probs.setflags(write=False)

    def __len__(self) -> int:
        return len(self.probs)

    def items(self) -> Iterable[Tuple[Tuple[int, ...], float]]:
        for seq, p in zip(self.seqs, self.probs):
            yield tuple(int(s) for s in seq), float(p)

    def prob(self, seq: Sequence[int]) -> float:
        hit = np.all(self.seqs == np.asarray(seq, dtype=np.int64), axis=1)
        return float(self.probs[hit].sum())

    def entropy(self) -> float:
        """H[x_0] in nats."""
        return entropy(self.probs)

    def marginals(self) -> np.ndarray:
        """Per-position marginals, shape (L, |V|)."""
        out = np.zeros((self.L, self.vocab.size))
        for pos in range(self.L):
            out[pos] = np.bincount(self.seqs[:, pos], weights=self.probs, minlength=self.vocab.size)
        return out

    def block_joint(self, part: BlockPartition, block: int) -> "TabularJoint":
        """Marginal joint of one block's positions."""
        start, stop = part.span(block)
        acc: Dict[Tuple[int, ...], float] = {}
        for seq, p in self.items():
            key = seq[start:stop]
            acc[key] = acc.get(key, 0.0) + p
        return TabularJoint(self.vocab, stop - start, acc)

    def mode(self) -> Tuple[int, ...]:
        """Most likely sequence; ties go to the lexicographically smallest."""
        best = np.flatnonzero(self.probs >= self.probs.max() - PROB_TOL)
        return tuple(int(s) for s in self.seqs[best[0]])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=self.probs / self.probs.sum())
        return self.seqs[idx].copy()

    def save(self, path: Union[str, Path]) -> None:
        """Write one `tokens<TAB>probability` line per sequence."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for seq, p in self.items():
                f.write(" ".join(str(s) for s in seq) + "\t" + repr(p) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path], vocab: Vocabulary, normalize: bool = False) -> "TabularJoint":
        probs: Dict[Tuple[int, ...], float] = {}
        L = None
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    tokens, p = line.split("\t")
                    seq = tuple(int(tok) for tok in tokens.split())
                    value = float(p)
                except ValueError as e:
                    raise ContractViolation(f"{path}:{lineno}: malformed joint line {line!r}: {e}")
                if L is None:
                    L = len(seq)
                probs[seq] = probs.get(seq, 0.0) + value
        if L is None:
            raise ContractViolation(f"{path} contains no sequences")
        if normalize:
            total = sum(probs.values())
            probs = {k: v / total for k, v in probs.items()}
        return cls(vocab, L, probs)


def normalize_joint(vocab: Vocabulary, L: int, weights: Dict[Tuple[int, ...], float]) -> TabularJoint:
    total = float(sum(weights.values()))
    if total <= 0:
        raise ContractViolation("Joint weights sum to zero")
    return TabularJoint(vocab, L, {k: v / total for k, v in weights.items()})


def uniform_joint(vocab: Vocabulary, seqs: Iterable[Sequence[int]]) -> TabularJoint:
    seqs = [tuple(s) for s in seqs]
    return normalize_joint(vocab, len(seqs[0]), {s: 1.0 for s in seqs})


def random_joint(
    vocab: Vocabulary, L: int, rng: np.random.Generator, concentration: float = 0.5, support_fraction: float = 1.0
) -> TabularJoint:
    """Dirichlet-random joint over content sequences (optionally sparse)."""
    content = vocab.content_ids
    seqs = list(itertools.product(content, repeat=L))
    weights = rng.dirichlet(np.full(len(seqs), concentration))
    if support_fraction < 1.0:
        keep = rng.random(len(seqs)) < support_fraction
        keep[int(np.argmax(weights))] = True
        weights = np.where(keep, weights, 0.0)
    return normalize_joint(vocab, L, {s: float(w) for s, w in zip(seqs, weights)})


def product_joint(vocab: Vocabulary, marginals: np.ndarray) -> TabularJoint:
    """Joint with independent positions, marginals shape (L, |V|)."""
    marginals = np.asarray(marginals, dtype=np.float64)
    supports = [np.flatnonzero(row > 0) for row in marginals]
    weights = {}
    for seq in itertools.product(*supports):
        weights[tuple(int(s) for s in seq)] = float(np.prod([marginals[i, s] for i, s in enumerate(seq)]))
    return normalize_joint(vocab, marginals.shape[0], weights)


def random_product_joint(vocab: Vocabulary, L: int, rng: np.random.Generator) -> TabularJoint:
    marginals = np.zeros((L, vocab.size))
    content = list(vocab.content_ids)
    for pos in range(L):
        marginals[pos, content] = rng.dirichlet(np.ones(len(content)))
    return product_joint(vocab, marginals)


def counterexample_joint() -> TabularJoint:
    """Two-token block whose top-1 truncated marginals exclude the global mode."""
    vocab = Vocabulary.with_content(len(COUNTEREXAMPLE_LABELS), COUNTEREXAMPLE_LABELS)
    roger, houston, you, i, they = range(5)
    return TabularJoint(
        vocab,
        2,
        {(roger, roger): 0.45, (houston, you): 0.25, (houston, i): 0.25, (houston, they): 0.05},
    )


# ============================================================================
# Exact conditionals
# ============================================================================

def _compatible(q: TabularJoint, x_t: np.ndarray) -> np.ndarray:
    observed = x_t != q.vocab.mask_id
    if not observed.any():
        return np.ones(len(q.probs), dtype=bool)
    return np.all(q.seqs[:, observed] == x_t[observed], axis=1)


def conditional_marginal(q: TabularJoint, x_t: Sequence[int], pos: int) -> np.ndarray:
    """
    Exact q(x_0^pos | x_t) as a vector over the vocabulary.

    MASK never receives mass. Raises UnreachableEvidence when no sequence in
    q agrees with the unmasked positions of x_t.
    """
    x_t = check_token_seq(x_t, q.vocab)
    if x_t.size != q.L:
        raise ContractViolation(f"x_t has length {x_t.size}, joint has L={q.L}")
    if x_t[pos] != q.vocab.mask_id:
        raise ContractViolation(f"Position {pos} is not masked in x_t")
    hit = _compatible(q, x_t)
    mass = float(q.probs[hit].sum())
    if mass <= 0.0:
        raise UnreachableEvidence(f"x_t = {x_t.tolist()} has zero mass under the joint")
    return np.bincount(q.seqs[hit, pos], weights=q.probs[hit], minlength=q.vocab.size) / mass


def block_conditional(
    q: TabularJoint, x_t: Sequence[int], part: BlockPartition, block: int, prefix: Sequence[int] = ()
) -> np.ndarray:
    """
    Exact next-token conditional inside a block given context and a decoded prefix.

    Positions of the block past the prefix must be masked in x_t; prefix
    positions may be masked or already hold the prefix tokens.
    """
    x_t = check_token_seq(x_t, q.vocab, part)
    start, stop = part.span(block)
    k = len(prefix)
    if k >= part.B:
        raise ContractViolation(f"Prefix length {k} must be smaller than the block size {part.B}")
    if np.any(x_t[start + k:stop] != q.vocab.mask_id):
        raise ContractViolation(f"Block {block} must be masked past its prefix, got {x_t[start:stop].tolist()}")
    evidence = x_t.copy()
    for j, tok in enumerate(prefix):
        if evidence[start + j] not in (q.vocab.mask_id, tok):
            raise ContractViolation(f"Prefix token {tok} disagrees with x_t at position {start + j}")
        evidence[start + j] = tok
    try:
        return conditional_marginal(q, evidence, start + k)
    except UnreachableEvidence as e:
        raise UnreachableEvidence(f"Prefix {list(prefix)} of block {block} has zero mass: {e}")


def block_chain_rule_tv(q: TabularJoint, part: BlockPartition, block: int, x_t: Optional[Sequence[int]] = None) -> float:
    """
    Total-variation distance between the chain-rule product of block_conditional
    and the block's exact conditional joint given x_t (fully masked block).
    """
    if x_t is None:
        x_t = np.full(q.L, q.vocab.mask_id, dtype=np.int64)
    x_t = check_token_seq(x_t, q.vocab, part)
    start, stop = part.span(block)
    hit = _compatible(q, x_t)
    mass = float(q.probs[hit].sum())
    if mass <= 0.0:
        raise UnreachableEvidence(f"x_t = {x_t.tolist()} has zero mass under the joint")
    target: Dict[Tuple[int, ...], float] = {}
    for seq, p in zip(q.seqs[hit], q.probs[hit]):
        key = tuple(int(s) for s in seq[start:stop])
        target[key] = target.get(key, 0.0) + float(p) / mass

    chain: Dict[Tuple[int, ...], float] = {}

    def expand(prefix: Tuple[int, ...], p: float) -> None:
        if len(prefix) == part.B:
            chain[prefix] = chain.get(prefix, 0.0) + p
            return
        dist = block_conditional(q, x_t, part, block, prefix)
        for tok in np.flatnonzero(dist > 0):
            expand(prefix + (int(tok),), p * float(dist[tok]))

    expand((), 1.0)
    keys = set(target) | set(chain)
    return 0.5 * sum(abs(target.get(k, 0.0) - chain.get(k, 0.0)) for k in keys)


# ============================================================================
# NELBO bounds
# ============================================================================

@dataclass
class NelboTerm:
    """Contribution of one step t to the smallest achievable NELBO."""
    t: int
    block_entropy_sum: float
    joint_entropy: float

    @property
    def total_correlation(self) -> float:
        """Total correlation across blocks at this step."""
        return self.block_entropy_sum - self.joint_entropy


def _transition_rows(q: TabularJoint, sched: NoiseSchedule, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Enumerate (x_{t-1}, x_t) with their joint mass under q and the schedule.

    Each position independently either survives both steps, survives to t-1
    and is absorbed at t, or is already absorbed at t-1.
    """
    n_rows = len(q) * 3**q.L
    if n_rows > MAX_TRANSITION_ROWS:
        raise IntractableInstance(
            f"Exact NELBO needs {len(q)} sequences x 3^{q.L} patterns = {n_rows} rows (limit {MAX_TRANSITION_ROWS})"
        )
    if q.vocab.size ** (2 * q.L) >= 2**62:
        raise IntractableInstance(f"Keys for |V|={q.vocab.size}, L={q.L} overflow int64")
    a_prev, a_t = sched.alpha(t - 1), sched.alpha(t)
    state_probs = np.array([a_t, a_prev - a_t, 1.0 - a_prev])
    patterns = np.array(list(itertools.product(range(3), repeat=q.L)), dtype=np.int64).reshape(-1, q.L)
    pattern_probs = np.prod(state_probs[patterns], axis=1)
    keep = pattern_probs > 0
    patterns, pattern_probs = patterns[keep], pattern_probs[keep]
    mask = q.vocab.mask_id
    x0 = q.seqs[:, None, :]
    x_prev = np.where(patterns[None] == 2, mask, x0).reshape(-1, q.L)
    x_t = np.where(patterns[None] >= 1, mask, x0).reshape(-1, q.L)
    weights = (q.probs[:, None] * pattern_probs[None]).ravel()
    return x_prev, x_t, weights


def _conditional_entropy(target: np.ndarray, x_t: np.ndarray, weights: np.ndarray, base: int) -> float:
    """H[target | x_t] = H[target, x_t] - H[x_t]."""
    t_keys = _encode(x_t, base)
    joint_keys = t_keys * base ** target.shape[1] + _encode(target, base)
    return _grouped_entropy(joint_keys, weights) - _grouped_entropy(t_keys, weights)


def nelbo_terms(q: TabularJoint, sched: NoiseSchedule, B: int) -> List[NelboTerm]:
    """Per-step sums Σ_i H[b^i_{t-1} | x_t] and H[x_{t-1} | x_t]."""
    part = BlockPartition(q.L, B)
    base = q.vocab.size
    terms = []
    for t in range(1, sched.T + 1):
        x_prev, x_t, w = _transition_rows(q, sched, t)
        joint = _conditional_entropy(x_prev, x_t, w, base)
        blocks = 0.0
        for b in range(part.num_blocks):
            start, stop = part.span(b)
            blocks += _conditional_entropy(x_prev[:, start:stop], x_t, w, base)
        terms.append(NelboTerm(t=t, block_entropy_sum=blocks, joint_entropy=joint))
    return terms


def nelbo_bound(q: TabularJoint, sched: NoiseSchedule, B: int) -> float:
    """Smallest achievable NELBO (nats) under conditional block independence."""
    return q.entropy() + sum(term.total_correlation for term in nelbo_terms(q, sched, B))


def nelbo_gap(q: TabularJoint, sched: NoiseSchedule, B: int) -> float:
    """Summed within-block total correlation, equal to nelbo_bound(B=1) - nelbo_bound(B)."""
    part = BlockPartition(q.L, B)
    base = q.vocab.size
    gap = 0.0
    for t in range(1, sched.T + 1):
        x_prev, x_t, w = _transition_rows(q, sched, t)
        for b in range(part.num_blocks):
            start, stop = part.span(b)
            tokens = sum(
                _conditional_entropy(x_prev[:, pos:pos + 1], x_t, w, base) for pos in range(start, stop)
            )
            gap += tokens - _conditional_entropy(x_prev[:, start:stop], x_t, w, base)
    return gap


# ============================================================================
# Closed-form KL
# ============================================================================

def kl_closed_form_check(q: TabularJoint, sched: NoiseSchedule, x_0: Sequence[int], t: int) -> Tuple[float, float]:
    """
    Compare the cross-entropy form of the per-step KL with a brute-force sum.

    The model is the token-factorized reverse process built from the exact
    conditional marginals. Both values are averaged exactly over the 2^L mask
    patterns of q(x_t | x_0).
    """
    vocab = q.vocab
    x_0 = check_token_seq(x_0, vocab)
    # rejects t outside 1..T
    w_t = loss_weight(t, sched)
    if q.prob(x_0) <= 0.0:
        raise UnreachableEvidence(f"x_0 = {x_0.tolist()} has zero mass under the joint")
    a_t = sched.alpha(t)
    closed_total, brute_total = 0.0, 0.0
    for pattern in itertools.product((False, True), repeat=q.L):
        masked = np.array(pattern, dtype=bool)
        n_masked = int(masked.sum())
        weight = a_t ** (q.L - n_masked) * (1.0 - a_t) ** n_masked
        if weight == 0.0:
            continue
        x_t = np.where(masked, vocab.mask_id, x_0)
        closed, brute = 0.0, 0.0
        if n_masked:
            model = {int(pos): conditional_marginal(q, x_t, int(pos)) for pos in np.flatnonzero(masked)}
            closed = sum(-w_t * np.log(model[pos][x_0[pos]]) for pos in model)
            brute = _brute_force_kl(q, sched, x_0, x_t, t, model)
        closed_total += weight * closed
        brute_total += weight * brute
    return float(closed_total), float(brute_total)


def _brute_force_kl(
    q: TabularJoint, sched: NoiseSchedule, x_0: np.ndarray, x_t: np.ndarray, t: int, model: Dict[int, np.ndarray]
) -> float:
    """D_KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)) by summing over every x_{t-1} in q's support."""
    vocab = q.vocab
    q_rows, p_rows = [], []
    for pos in range(q.L):
        q_vec = np.zeros(vocab.size)
        for tok, p in posterior_step(int(x_t[pos]), int(x_0[pos]), t, sched, vocab).items():
            q_vec[tok] += p
        if pos in model:
            # p(x_{t-1} | x_t) = E_{x~p(x_0|x_t)} q(x_{t-1} | x_t, x)
            p_vec = np.zeros(vocab.size)
            for tok in np.flatnonzero(model[pos] > 0):
                for nxt, p in posterior_step(vocab.mask_id, int(tok), t, sched, vocab).items():
                    p_vec[nxt] += model[pos][tok] * p
        else:
            p_vec = q_vec.copy()
        q_rows.append(q_vec)
        p_rows.append(p_vec)
    kl = 0.0
    supports = [np.flatnonzero(row > 0) for row in q_rows]
    for x_prev in itertools.product(*supports):
        q_prob = float(np.prod([q_rows[i][s] for i, s in enumerate(x_prev)]))
        p_prob = float(np.prod([p_rows[i][s] for i, s in enumerate(x_prev)]))
        kl += q_prob * np.log(q_prob / p_prob)
    return kl


# ============================================================================
# Frechet-class restriction
# ============================================================================

@dataclass
class MarginalSet:
    """Per-position categorical distributions, shape (B, |V|)."""
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        sums = self.probs.sum(axis=1)
        if np.any(self.probs < 0) or np.any(np.abs(sums - 1.0) > PROB_TOL):
            raise ContractViolation(f"Each marginal must be a distribution, row sums {sums.tolist()}")

    def __len__(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        """Per-position most likely token; ties go to the lowest index."""
        return np.array([ranked_tokens(row)[0] for row in self.probs], dtype=np.int64)


def ranked_tokens(dist: np.ndarray) -> List[int]:
    """Tokens with positive mass, by decreasing mass then increasing index."""
    rounded = np.round(np.asarray(dist, dtype=np.float64), RANK_DECIMALS)
    support = np.flatnonzero(rounded > 0)
    return [int(s) for s in sorted(support, key=lambda tok: (-rounded[tok], tok))]


@dataclass
class FrechetSupport:
    """Top-k token sets per position and their Cartesian product."""
    k: int
    sets: Tuple[Tuple[int, ...], ...]
    marginals: MarginalSet
    product: Optional[List[Tuple[int, ...]]] = None

    @property
    def product_size(self) -> int:
        return int(np.prod([len(s) for s in self.sets]))

    def contains(self, block: Sequence[int]) -> bool:
        return all(int(tok) in s for tok, s in zip(block, self.sets))

    def truncated_marginals(self) -> np.ndarray:
        """pi_top-k: each marginal restricted to its top-k set and renormalized."""
        out = np.zeros_like(self.marginals.probs)
        for pos, keep in enumerate(self.sets):
            idx = list(keep)
            out[pos, idx] = self.marginals.probs[pos, idx]
            out[pos] /= out[pos].sum()
        return out


def frechet_truncate(pi: Union[MarginalSet, np.ndarray], k: int) -> FrechetSupport:
    """Top-k sets per position with lowest-index tie-breaking."""
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    pi = pi if isinstance(pi, MarginalSet) else MarginalSet(pi)
    sets = tuple(tuple(sorted(ranked_tokens(row)[:k])) for row in pi.probs)
    support = FrechetSupport(k=k, sets=sets, marginals=pi)
    if support.product_size <= MAX_PRODUCT_SUPPORT:
        support.product = [tuple(int(s) for s in combo) for combo in itertools.product(*sets)]
    return support


@dataclass
class ModeExclusion:
    """Whether the joint mode survives the top-k product support."""
    excluded: bool
    mode: Tuple[int, ...]
    support: FrechetSupport


def mode_exclusion_witness(q: TabularJoint, k: int) -> ModeExclusion:
    """Check whether q's global mode lies outside the top-k support of its own marginals."""
    support = frechet_truncate(MarginalSet(q.marginals()), k)
    mode = q.mode()
    return ModeExclusion(excluded=not support.contains(mode), mode=mode, support=support)
