"""
Reproduce the qualitative trends on tiny models and exact oracles.

Three experiments:
- loss: executors with B in {1, 2, 4} trained against a pretrained, frozen
  denoiser under a fixed contiguous 8-token mask on interleaved paired-tokens
  L=16; the smoothed per-token loss should not increase with B.
- cond: soft and top-1 executors on paired-tokens L=8 with B in {2, 4},
  benched with neural models; soft validity should match or beat top-1.
- topk: oracle decoding of the two-token counterexample with the executor
  unrestricted, top-2 and top-1; top-1 never produces the joint's mode.

Usage:
    python scripts/reproduce_trends.py --part loss --steps 600 --seeds 0 1 2
    python scripts/reproduce_trends.py --part cond --steps 400
    python scripts/reproduce_trends.py --part topk --samples 2000
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd
from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).parent.parent))

from app.config import get_output_dir  # noqa: E402
from app.trends import (  # noqa: E402
    block_size_loss_trend,
    conditioning_validity_trend,
    interleaved_corpus,
    soft_beats_top1,
    topk_mode_trend,
)

load_dotenv()


def print_section(title: str):
    """Print a formatted section header."""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70 + "\n")


def loss_part(steps: int, seeds, window: int) -> pd.DataFrame:
    corpus = interleaved_corpus()
    rows = []
    for seed in seeds:
        trend = block_size_loss_trend(corpus, seed, steps=steps, window=window)
        for B, final in trend.final.items():
            rows.append({"seed": seed, "B": B, "final_loss": final})
            print(f"seed {seed} B={B}: smoothed loss {final:.4f}")
        status = "✅" if trend.ordered() else "❌"
        print(f"{status} seed {seed}: ordered={trend.ordered()} denoiser frozen={trend.denoiser_unchanged}")
    return pd.DataFrame(rows)


def cond_part(steps: int, seeds, samples: int, out: Path) -> pd.DataFrame:
    frames = [
        conditioning_validity_trend(out / f"conditioning_seed{seed}", seed, steps=steps, n_samples=samples)
        for seed in seeds
    ]
    frame = pd.concat(frames, ignore_index=True)
    wide = soft_beats_top1(frame)
    for row in wide.to_dict(orient="records"):
        status = "✅" if row["margin"] >= 0 else "❌"
        print(f"{status} seed {row['seed']} B={row['B']}: soft {row['soft']:.3f} vs top-1 {row['top1']:.3f}")
    return frame


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--part", choices=["loss", "cond", "topk", "all"], default="all")
    parser.add_argument("--steps", type=int, default=None, help="Executor steps (loss: 600, cond: 400)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--window", type=int, default=100)
    parser.add_argument("--samples", type=int, default=None, help="Decodes per cell (cond: 64, topk: 2000)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = get_output_dir() / "trends"
    out.mkdir(parents=True, exist_ok=True)

    if args.part in ("loss", "all"):
        print_section("Per-token loss vs block size (span masking, frozen denoiser)")
        frame = loss_part(args.steps or 600, args.seeds, args.window)
        frame.to_csv(out / "loss_trend.csv", index=False)
        print()
        print(frame.groupby("B")["final_loss"].mean().to_string())

    if args.part in ("cond", "all"):
        print_section("Validity of soft vs top-1 conditioned executors")
        cond_part(args.steps or 400, args.seeds, args.samples or 64, out).to_csv(
            out / "conditioning_trend.csv", index=False
        )

    if args.part in ("topk", "all"):
        print_section("Mode rate under top-k restricted block decoding")
        frame = topk_mode_trend(args.samples or 2000, args.seeds[0])
        print(frame.to_string(index=False))
        frame.to_csv(out / "topk_trend.csv", index=False)

    print(f"\n✅ results in {out}")


if __name__ == "__main__":
    main()
