"""
Experiment orchestration: single decodes and the bench grid.

A bench run writes, under <output>/bench/<config hash>/:
- runs.csv: one RunRecord per grid cell
- traces/<cell>.csv: every committed step of every sample
- samples/<cell>.csv: generated sequences with their validity
- timings.json: wall-clock per cell (kept out of runs.csv so reruns are byte-identical)
"""

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.config import BlockLabConfig, DecodeSection, config_hash, get_output_dir
from app.evals.metrics import exact_match_rate, validity_rate
from app.languages import Corpus, gen_language
from app.models.registry import ModelRegistry, get_model_registry
from engine.decoding import GenerationResult, SchedulerConfig, generate
from engine.diffusion import derive_rng
from engine.errors import ConfigError, StepBudgetExceeded, UnreachableEvidence

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    config_hash: str
    cell: str
    seed: int
    mode: str
    B: int
    tau: float
    scope: int
    conditioning: str
    topk: int
    predictor: str
    executor: str
    n_samples: int
    validity_rate: float
    exact_match_rate: float
    tokens_per_step: float
    steps: float
    mean_entropy: float
    executor_calls_per_token: float
    failures: int

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> "RunRecord":
        kwargs = {}
        for f in fields(cls):
            value = row[f.name]
            if f.type is int:
                value = int(value)
            elif f.type is float:
                value = float(value)
            else:
                value = str(value)
            kwargs[f.name] = value
        return cls(**kwargs)


def write_records(records: List[RunRecord], path: Path) -> None:
    pd.DataFrame([asdict(r) for r in records]).to_csv(path, index=False)


def read_records(path: Path) -> List[RunRecord]:
    frame = pd.read_csv(path, dtype={"config_hash": str, "cell": str})
    return [RunRecord.from_row(row) for row in frame.to_dict(orient="records")]


# ============================================================================
# Models and corpus
# ============================================================================

def load_language(config: BlockLabConfig) -> Corpus:
    lang = config.language
    return gen_language(lang.kind, lang.L, lang.params(), lang.seed, lang.n_train, lang.n_val)


def resolve_models(config: BlockLabConfig, corpus: Corpus, decode: DecodeSection, B: int, conditioning: str,
                   registry: Optional[ModelRegistry] = None):
    """Predictor and executor named by the decode section."""
    registry = registry or get_model_registry(get_output_dir())
    joint = corpus.language.joint
    predictor = registry.predictor(decode.predictor, joint=joint, checkpoint=config.denoiser.checkpoint)
    executor_ckpt = config.executor.checkpoint.format(B=B, conditioning=conditioning)
    executor = registry.executor(decode.executor, corpus.language.vocab, joint=joint, checkpoint=executor_ckpt)
    return predictor, executor


def prompt_for(corpus: Corpus, index: int, fraction: float) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Pinned prompt and reference sequence for sample `index`."""
    if fraction <= 0:
        return np.zeros(0, dtype=np.int64), None
    reference = corpus.val[index % len(corpus.val)]
    return reference[: int(fraction * corpus.language.L)].copy(), reference


# ============================================================================
# Cells
# ============================================================================

@dataclass
class Cell:
    mode: str
    B: int
    tau: float
    scope: int
    conditioning: str
    topk: Optional[int]
    seed: int

    @property
    def name(self) -> str:
        tau = "na" if math.isnan(self.tau) else f"{self.tau:g}"
        topk = "all" if self.topk is None else str(self.topk)
        return f"{self.mode}_B{self.B}_tau{tau}_scope{self.scope}_{self.conditioning}_top{topk}_seed{self.seed}"


def grid_cells(config: BlockLabConfig) -> List[Cell]:
    """Expand the bench grid; tau only varies in dynamic mode, invalid block sizes are skipped."""
    bench = config.bench
    cells, seen = [], set()
    for mode, B, tau, scope, cond, topk, seed in itertools.product(
        bench.mode, bench.block_size, bench.tau, bench.scope, bench.conditioning, bench.topk, bench.seeds
    ):
        if config.language.L % B:
            log.warning("Skipping B=%d: does not divide L=%d", B, config.language.L)
            continue
        cell = Cell(mode, B, tau if mode == "dynamic" else float("nan"), scope, cond, topk, seed)
        if cell.name not in seen:
            seen.add(cell.name)
            cells.append(cell)
    return cells


@dataclass
class CellOutcome:
    record: RunRecord
    results: List[Optional[GenerationResult]]
    samples: List[np.ndarray]
    wall_time: float


def run_cell(config: BlockLabConfig, corpus: Corpus, cell: Cell, n_samples: int, digest: str,
             registry: Optional[ModelRegistry] = None) -> CellOutcome:
    decode = config.decode
    L = corpus.language.L
    predictor, executor = resolve_models(config, corpus, decode, cell.B, cell.conditioning, registry)
    try:
        sched = SchedulerConfig(
            mode=cell.mode,
            tau=cell.tau if cell.mode == "dynamic" else decode.tau,
            scope=cell.scope,
            blocks_per_step=decode.blocks_per_step,
            tokens_per_step=decode.tokens_per_step,
            temperature=decode.temperature,
            top_p=decode.top_p,
            greedy=decode.greedy,
            conditioning=cell.conditioning,
            topk=cell.topk,
        )
    except ValueError as e:
        raise ConfigError(f"Invalid cell {cell.name}: {e}")
    started = time.perf_counter()
    results, samples, references, failures = [], [], [], 0
    for i in range(n_samples):
        prompt, reference = prompt_for(corpus, i, decode.prompt_fraction)
        seed = int(derive_rng(cell.seed, cell.B, i).integers(0, 2**31 - 1))
        try:
            result = generate(prompt, L, cell.B, predictor, executor, sched, seed)
            tokens = result.tokens
        except (UnreachableEvidence, StepBudgetExceeded) as e:
            log.debug("Cell %s sample %d failed: %s", cell.name, i, e)
            failures += 1
            result, tokens = None, np.full(L, corpus.language.vocab.mask_id, dtype=np.int64)
        results.append(result)
        samples.append(tokens)
        references.append(reference)

    finished = [r for r in results if r is not None]

    def mean_stat(key: str) -> float:
        return float(np.mean([r.stats[key] for r in finished])) if finished else float("nan")

    exact = float("nan")
    if decode.prompt_fraction > 0:
        exact = exact_match_rate(samples, references)
    record = RunRecord(
        config_hash=digest,
        cell=cell.name,
        seed=cell.seed,
        mode=cell.mode,
        B=cell.B,
        tau=cell.tau,
        scope=cell.scope,
        conditioning=cell.conditioning,
        topk=cell.topk if cell.topk is not None else 0,
        predictor=decode.predictor,
        executor=decode.executor,
        n_samples=n_samples,
        validity_rate=validity_rate(samples, corpus.language.is_valid),
        exact_match_rate=exact,
        tokens_per_step=mean_stat("tokens_per_step"),
        steps=mean_stat("steps"),
        mean_entropy=mean_stat("mean_entropy"),
        executor_calls_per_token=mean_stat("executor_calls_per_token"),
        failures=failures,
    )
    return CellOutcome(record, results, samples, time.perf_counter() - started)


def trace_frame(results: List[Optional[GenerationResult]]) -> pd.DataFrame:
    rows = []
    for i, result in enumerate(results):
        if result is None:
            continue
        for entry in result.trace:
            rows.append({"sample": i, **entry.as_row()})
    columns = ["sample", "iter", "block", "k", "fallback", "entropy", "committed_tokens", "kind"]
    return pd.DataFrame(rows, columns=columns)


def samples_frame(samples: List[np.ndarray], checker) -> pd.DataFrame:
    return pd.DataFrame({
        "sample": range(len(samples)),
        "tokens": [" ".join(str(int(t)) for t in s) for s in samples],
        "valid": [int(checker(s)) for s in samples],
    })


def run_experiment(config: BlockLabConfig, output_dir: Optional[Path] = None,
                   registry: Optional[ModelRegistry] = None) -> Tuple[List[RunRecord], Path]:
    """
    Run every bench cell and write the CSV artifacts.

    Returns:
        The records and the run directory
    """
    digest = config_hash(config)
    run_dir = Path(output_dir or get_output_dir()) / "bench" / digest
    (run_dir / "traces").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    corpus = load_language(config)
    records, timings = [], {}
    cells = grid_cells(config)
    for n, cell in enumerate(cells, 1):
        outcome = run_cell(config, corpus, cell, config.bench.n_samples, digest, registry)
        trace_frame(outcome.results).to_csv(run_dir / "traces" / f"{cell.name}.csv", index=False)
        samples_frame(outcome.samples, corpus.language.is_valid).to_csv(
            run_dir / "samples" / f"{cell.name}.csv", index=False
        )
        records.append(outcome.record)
        timings[cell.name] = outcome.wall_time
        log.info("[%d/%d] %s validity=%.3f tokens/step=%.2f", n, len(cells), cell.name,
                 outcome.record.validity_rate, outcome.record.tokens_per_step)
    write_records(records, run_dir / "runs.csv")
    with open(run_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
    with open(run_dir / "timings.json", "w", encoding="utf-8") as f:
        json.dump(timings, f, indent=2, sort_keys=True)
    return records, run_dir
