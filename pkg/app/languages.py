"""
Synthetic languages with exact validity checkers.

- paired-tokens: L/2 independent pairs (j, j+1 mod n); every valid pair is
  equally likely, so each position's marginal is uniform and token-independent
  sampling forms a valid pair with probability 1/n; interleave=1 strides
  half the pairs across 4-token halves of every 8-token window
- bracket-balance: balanced "(" / ")" strings of length L with nesting depth
  at most D, uniform over the valid strings
- copy-with-separator: w | w | with w uniform over alphabet^(L/2 - 1)

A language carries an exact TabularJoint whenever the joint is small enough to
enumerate, otherwise only its sampler.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from engine.diffusion import Vocabulary, derive_rng
from engine.errors import ContractViolation, IntractableInstance
from engine.oracle import MAX_JOINT_SPACE, TabularJoint, uniform_joint

log = logging.getLogger(__name__)

KINDS = ("paired-tokens", "bracket-balance", "copy-with-separator")
MAX_ENUMERATED = 10**5

OPEN, CLOSE = 0, 1


@dataclass
class SyntheticLanguage:
    kind: str
    vocab: Vocabulary
    L: int
    seed: int
    params: Dict[str, int]
    checker: Callable[[Sequence[int]], bool] = field(repr=False)
    sampler: Callable[[int, np.random.Generator], np.ndarray] = field(repr=False)
    joint: Optional[TabularJoint] = field(default=None, repr=False)

    @property
    def tabular(self) -> bool:
        return self.joint is not None

    def is_valid(self, seq: Sequence[int]) -> bool:
        return len(seq) == self.L and bool(self.checker([int(s) for s in seq]))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sampler(n, rng)

    def require_joint(self) -> TabularJoint:
        if self.joint is None:
            raise IntractableInstance(
                f"{self.kind} with L={self.L} has no tabular joint "
                f"({len(self.vocab.output_ids)}^{self.L} sequences exceeds {MAX_JOINT_SPACE})"
            )
        return self.joint

    def to_config(self) -> Dict:
        return {"kind": self.kind, "L": self.L, "seed": self.seed, "params": self.params,
                "vocab": self.vocab.to_config()}


# ============================================================================
# paired-tokens
# ============================================================================

def pair_positions(L: int, interleave: int = 0) -> List[Tuple[int, int]]:
    """
    (first, partner) position pairs of a paired-tokens sequence.

    The plain layout pairs (0,1), (2,3), ... With interleave=1 every 8-token
    window keeps two adjacent pairs (0,1), (2,3) and strides the other two
    across halves, (4,6), (5,7), so a 4-token block sees dependencies that a
    2-token block cannot.
    """
    if L % 2:
        raise ContractViolation(f"paired-tokens needs an even length, got L={L}")
    if not interleave:
        return [(i, i + 1) for i in range(0, L, 2)]
    if L % 8:
        raise ContractViolation(f"interleaved paired-tokens needs L divisible by 8, got L={L}")
    pairs = []
    for w in range(0, L, 8):
        pairs += [(w, w + 1), (w + 2, w + 3), (w + 4, w + 6), (w + 5, w + 7)]
    return pairs


def _paired(L: int, n_pairs: int, interleave: int = 0) -> Tuple[Vocabulary, Callable, Callable, Callable]:
    pairs = pair_positions(L, interleave)
    firsts = [i for i, _ in pairs]
    seconds = [j for _, j in pairs]
    vocab = Vocabulary.with_content(n_pairs)

    def partner(tok: int) -> int:
        return (tok + 1) % n_pairs

    def check(seq: List[int]) -> bool:
        return all(seq[i] < n_pairs and seq[j] == partner(seq[i]) for i, j in pairs)

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        first = rng.integers(0, n_pairs, size=(n, len(pairs)))
        out = np.empty((n, L), dtype=np.int64)
        out[:, firsts] = first
        out[:, seconds] = (first + 1) % n_pairs
        return out

    def enumerate_valid():
        for chosen in itertools.product(range(n_pairs), repeat=len(pairs)):
            seq = [0] * L
            for (i, j), a in zip(pairs, chosen):
                seq[i], seq[j] = a, partner(a)
            yield tuple(seq)

    return vocab, check, sample, enumerate_valid


# ============================================================================
# bracket-balance
# ============================================================================

def _brackets(L: int, depth: int) -> Tuple[Vocabulary, Callable, Callable, Callable]:
    if L % 2:
        raise ContractViolation(f"bracket-balance needs an even length, got L={L}")
    vocab = Vocabulary.with_content(2, ["(", ")"])

    @lru_cache(maxsize=None)
    def completions(pos: int, level: int) -> int:
        """Valid suffixes from position pos at nesting level."""
        if level < 0 or level > depth or level > L - pos:
            return 0
        if pos == L:
            return int(level == 0)
        return completions(pos + 1, level + 1) + completions(pos + 1, level - 1)

    if completions(0, 0) == 0:
        raise ContractViolation(f"No balanced strings of length {L} with depth <= {depth}")

    def check(seq: List[int]) -> bool:
        level = 0
        for tok in seq:
            if tok == OPEN:
                level += 1
            elif tok == CLOSE:
                level -= 1
            else:
                return False
            if level < 0 or level > depth:
                return False
        return level == 0

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, L), dtype=np.int64)
        for row in range(n):
            level = 0
            for pos in range(L):
                up = completions(pos + 1, level + 1)
                total = up + completions(pos + 1, level - 1)
                tok = OPEN if rng.random() * total < up else CLOSE
                out[row, pos] = tok
                level += 1 if tok == OPEN else -1
        return out

    def enumerate_valid():
        def walk(prefix: Tuple[int, ...], level: int):
            if len(prefix) == L:
                yield prefix
                return
            for tok, nxt in ((OPEN, level + 1), (CLOSE, level - 1)):
                if completions(len(prefix) + 1, nxt):
                    yield from walk(prefix + (tok,), nxt)
        yield from walk((), 0)

    return vocab, check, sample, enumerate_valid


# ============================================================================
# copy-with-separator
# ============================================================================

def _copy(L: int, alphabet: int) -> Tuple[Vocabulary, Callable, Callable, Callable]:
    if L % 2 or L < 4:
        raise ContractViolation(f"copy-with-separator needs an even length >= 4, got L={L}")
    labels = [chr(ord("a") + i) for i in range(alphabet)] + ["|"]
    vocab = Vocabulary.with_content(alphabet + 1, labels)
    sep = alphabet
    half = L // 2

    def check(seq: List[int]) -> bool:
        word = seq[: half - 1]
        return (
            all(tok < alphabet for tok in word)
            and seq[half - 1] == sep
            and seq[-1] == sep
            and seq[half:-1] == word
        )

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        words = rng.integers(0, alphabet, size=(n, half - 1))
        seps = np.full((n, 1), sep, dtype=np.int64)
        return np.concatenate([words, seps, words, seps], axis=1)

    def enumerate_valid():
        for word in itertools.product(range(alphabet), repeat=half - 1):
            yield word + (sep,) + word + (sep,)

    return vocab, check, sample, enumerate_valid


def make_language(kind: str, L: int, params: Optional[Dict[str, int]] = None, seed: int = 0) -> SyntheticLanguage:
    """Build a language; attaches the exact joint when it is enumerable."""
    params = dict(params or {})
    if kind == "paired-tokens":
        vocab, check, sample, enum = _paired(
            L, params.setdefault("n_pairs", 4), params.setdefault("interleave", 0)
        )
    elif kind == "bracket-balance":
        vocab, check, sample, enum = _brackets(L, params.setdefault("depth", 2))
    elif kind == "copy-with-separator":
        vocab, check, sample, enum = _copy(L, params.setdefault("alphabet", 3))
    else:
        raise ContractViolation(f"Unknown language kind {kind!r}; expected one of {KINDS}")
    joint = None
    if len(vocab.output_ids) ** L <= MAX_JOINT_SPACE:
        valid = list(itertools.islice(enum(), MAX_ENUMERATED + 1))
        if len(valid) <= MAX_ENUMERATED:
            joint = uniform_joint(vocab, valid)
    if joint is None:
        log.info("%s with L=%d is sampler-only (no tabular joint)", kind, L)
    return SyntheticLanguage(kind=kind, vocab=vocab, L=L, seed=seed, params=params, checker=check,
                             sampler=sample, joint=joint)


@dataclass
class Corpus:
    language: SyntheticLanguage
    train: np.ndarray
    val: np.ndarray


def gen_language(kind: str, L: int, params: Optional[Dict[str, int]] = None, seed: int = 0,
                 n_train: int = 4096, n_val: int = 512) -> Corpus:
    """Language plus deterministic train/validation splits."""
    language = make_language(kind, L, params, seed)
    train = language.sample(n_train, derive_rng(seed, 1))
    val = language.sample(n_val, derive_rng(seed, 2))
    return Corpus(language=language, train=train, val=val)


# ============================================================================
# Corpus files
# ============================================================================

def _write_split(path: Path, seqs: np.ndarray) -> None:
    pd.DataFrame({"tokens": [" ".join(str(int(t)) for t in row) for row in seqs]}).to_csv(path, index=False)


def _read_split(path: Path) -> np.ndarray:
    frame = pd.read_csv(path, dtype={"tokens": str})
    return np.array([[int(t) for t in row.split()] for row in frame["tokens"]], dtype=np.int64)


def save_corpus(corpus: Corpus, directory: Union[str, Path]) -> Path:
    """Write language.json, train.csv, val.csv and joint.tsv (when tabular)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "language.json", "w", encoding="utf-8") as f:
        json.dump(corpus.language.to_config(), f, indent=2, sort_keys=True)
    _write_split(directory / "train.csv", corpus.train)
    _write_split(directory / "val.csv", corpus.val)
    if corpus.language.joint is not None:
        corpus.language.joint.save(directory / "joint.tsv")
    return directory


def load_corpus(directory: Union[str, Path]) -> Corpus:
    directory = Path(directory)
    meta_path = directory / "language.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"No corpus at {directory}; run gen-data first")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    language = make_language(meta["kind"], meta["L"], meta["params"], meta["seed"])
    return Corpus(language=language, train=_read_split(directory / "train.csv"),
                  val=_read_split(directory / "val.csv"))
