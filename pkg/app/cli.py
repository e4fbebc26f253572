"""
Command-line entry point.

Subcommands:
- verify: exact-oracle theorem report (exit code 0 iff every check passes)
- gen-data: synthetic corpus and, when enumerable, its exact joint
- pretrain-denoiser / train-executor: tiny model training with checkpoints
- decode: one generation with its trace
- bench: the configured grid, written as CSV
- report: summary tables from a bench run

Usage:
    python -m app.cli verify --bits
    python -m app.cli bench --config configs/bench.yaml
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from app.config import BlockLabConfig, get_output_dir, load_config
from app.evals.theorems import verify_theorems
from app.experiments import load_language, prompt_for, resolve_models, run_experiment, trace_frame
from app.languages import Corpus, load_corpus, save_corpus
from app.models.registry import build_denoiser, build_executor, load_checkpoint, save_checkpoint
from app.training import pretrain_denoiser, smoothed, train_executor
from engine.decoding import generate
from engine.errors import BlockLabError


def print_section(title: str):
    """Print a formatted section header."""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70 + "\n")


def corpus_dir() -> Path:
    return get_output_dir() / "corpus"


def get_corpus(config: BlockLabConfig) -> Corpus:
    """Saved corpus when gen-data has run, otherwise a fresh one from the config."""
    if (corpus_dir() / "language.json").exists():
        return load_corpus(corpus_dir())
    return load_language(config)


# ============================================================================
# Subcommands
# ============================================================================

def cmd_verify(config: BlockLabConfig, args) -> int:
    v = config.verify
    print_section("Exact-oracle checks")
    report = verify_theorems(
        trials=args.trials or v.trials,
        seed=v.seed if args.seed is None else args.seed,
        product_trials=v.product_trials,
        max_vocab=v.max_vocab,
        max_L=v.max_L,
        max_T=v.max_T,
        x0_per_joint=v.x0_per_joint,
        tolerance=v.tolerance,
        bits=args.bits,
    )
    print(report.render())
    report.to_frame().to_csv(get_output_dir() / "verify.csv", index=False)
    print(f"\n{'✅ all checks passed' if report.passed else '❌ some checks failed'}")
    return 0 if report.passed else 1


def cmd_gen_data(config: BlockLabConfig, args) -> int:
    corpus = load_language(config)
    path = save_corpus(corpus, corpus_dir())
    lang = corpus.language
    print(f"✅ {lang.kind} L={lang.L}: {len(corpus.train)} train / {len(corpus.val)} val sequences")
    if lang.joint is not None:
        print(f"   exact joint with {len(lang.joint)} sequences, H = {lang.joint.entropy():.4f} nats")
    else:
        print("   sampler only (joint too large to enumerate)")
    print(f"   written to {path}")
    return 0


def cmd_pretrain_denoiser(config: BlockLabConfig, args) -> int:
    corpus = get_corpus(config)
    lang = corpus.language
    model = build_denoiser(lang.vocab, lang.L, config.denoiser, seed=args.seed)
    result = pretrain_denoiser(model, corpus.train, config.denoiser, seed=args.seed)
    path = save_checkpoint(model, get_output_dir() / config.denoiser.checkpoint)
    result.save_curve(path.with_suffix(".loss.csv"))
    final = smoothed(result.losses(), config.train.smooth_window)
    print(f"✅ denoiser trained for {config.denoiser.steps} steps")
    if final.size:
        print(f"   smoothed loss {final[-1]:.4f}")
    print(f"   checkpoint: {path}")
    return 0


def cmd_train_executor(config: BlockLabConfig, args) -> int:
    train_cfg = config.train.model_copy(update={
        k: v for k, v in {
            "block_size": args.block_size, "conditioning": args.conditioning,
            "masking": args.masking, "seed": args.seed,
        }.items() if v is not None
    })
    corpus = get_corpus(config)
    lang = corpus.language
    denoiser = load_checkpoint(get_output_dir() / config.denoiser.checkpoint, "denoiser")
    executor = build_executor(lang.vocab, config.executor, seed=train_cfg.seed)
    result = train_executor(executor, denoiser, corpus.train, train_cfg, val=corpus.val)
    name = config.executor.checkpoint.format(B=train_cfg.block_size, conditioning=train_cfg.conditioning)
    path = save_checkpoint(executor, get_output_dir() / name, state_dict=result.best_state)
    result.save_curve(path.with_suffix(".loss.csv"))
    final = smoothed(result.losses(), train_cfg.smooth_window)
    print(f"✅ executor B={train_cfg.block_size} ({train_cfg.conditioning}) trained for {train_cfg.steps} steps")
    if final.size:
        print(f"   smoothed per-token loss {final[-1]:.4f}")
    if result.best_step is not None:
        print(f"   best validation loss {result.best_val:.4f} at step {result.best_step}")
    print(f"   checkpoint: {path}")
    return 0


def cmd_decode(config: BlockLabConfig, args) -> int:
    decode = config.decode
    corpus = get_corpus(config)
    lang = corpus.language
    predictor, executor = resolve_models(config, corpus, decode, decode.block_size, decode.conditioning)
    prompt, reference = prompt_for(corpus, args.index, decode.prompt_fraction)
    seed = decode.seed if args.seed is None else args.seed
    result = generate(prompt, lang.L, decode.block_size, predictor, executor, decode.scheduler(), seed)
    print_section(f"{decode.mode} decode, B={decode.block_size}")
    print(f"sequence: {lang.vocab.render(result.tokens)}")
    print(f"valid:    {lang.is_valid(result.tokens)}")
    if reference is not None:
        print(f"matches reference: {bool(np.array_equal(result.tokens, reference))}")
    for key, value in result.stats.items():
        print(f"{key:>26}: {value:.4g}")
    path = Path(args.trace) if args.trace else get_output_dir() / "decode_trace.csv"
    trace_frame([result]).drop(columns="sample").to_csv(path, index=False)
    print(f"\ntrace: {path}")
    return 0


def cmd_bench(config: BlockLabConfig, args) -> int:
    records, run_dir = run_experiment(config)
    print_section(f"Bench {run_dir.name}: {len(records)} cells")
    frame = pd.DataFrame([r.__dict__ for r in records])
    columns = ["cell", "validity_rate", "exact_match_rate", "tokens_per_step", "steps", "failures"]
    print(frame[columns].to_string(index=False))
    print(f"\nruns: {run_dir / 'runs.csv'}")
    return 0


def cmd_report(config: BlockLabConfig, args) -> int:
    from reports.aggregations import generate_report

    run_dir = Path(args.run_dir) if args.run_dir else None
    try:
        outputs = generate_report(run_dir)
    except FileNotFoundError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    print("✅ report written")
    for path in outputs:
        print(f"   {path}")
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
    "pretrain-denoiser": cmd_pretrain_denoiser,
    "train-executor": cmd_train_executor,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocklab", description="Block-granular masked diffusion decoding")
    parser.add_argument("--config", help="YAML config (default $BLOCKLAB_CONFIG or configs/config.yaml)")
    parser.add_argument("--output-dir", help="Artifact directory (overrides $BLOCKLAB_OUTPUT_DIR)")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="Run the exact-oracle checks")
    verify.add_argument("--trials", type=int, default=None)
    verify.add_argument("--seed", type=int, default=None)
    verify.add_argument("--bits", action="store_true", help="Report entropies in bits")

    sub.add_parser("gen-data", help="Generate the synthetic corpus")

    pre = sub.add_parser("pretrain-denoiser", help="Token-level pretraining of the denoiser")
    pre.add_argument("--seed", type=int, default=0)

    train = sub.add_parser("train-executor", help="Train the block executor against the frozen denoiser")
    train.add_argument("--block-size", type=int, default=None)
    train.add_argument("--conditioning", choices=["soft", "top1"], default=None)
    train.add_argument("--masking", choices=["block", "span"], default=None)
    train.add_argument("--seed", type=int, default=None)

    decode = sub.add_parser("decode", help="Decode one sequence and dump its trace")
    decode.add_argument("--seed", type=int, default=None)
    decode.add_argument("--index", type=int, default=0, help="Validation sequence used for the prompt")
    decode.add_argument("--trace", help="Trace CSV path")

    sub.add_parser("bench", help="Run the bench grid")

    report = sub.add_parser("report", help="Summarize a bench run")
    report.add_argument("--run-dir", help="Bench run directory (default: latest)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.output_dir:
        os.environ["BLOCKLAB_OUTPUT_DIR"] = args.output_dir
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](config, args)
    except BlockLabError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
