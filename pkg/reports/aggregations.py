"""
Aggregations and reporting for bench runs.

Loads runs.csv into DuckDB, averages every grid cell over its seeds and
writes summary.csv plus a Markdown summary with the validity vs
tokens-per-step Pareto table.
"""

import logging
from pathlib import Path
from typing import List, Optional

import duckdb
import pandas as pd
from jinja2 import Environment, FileSystemLoader

from app.config import get_output_dir

log = logging.getLogger(__name__)

TEMPLATE = "summary.md.j2"

CELL_SUMMARY_SQL = """
    SELECT
        mode, B, tau, scope, conditioning, topk, predictor, executor,
        COUNT(*) AS seeds,
        AVG(validity_rate) AS validity_rate,
        AVG(exact_match_rate) AS exact_match_rate,
        AVG(tokens_per_step) AS tokens_per_step,
        AVG(steps) AS steps,
        AVG(executor_calls_per_token) AS executor_calls_per_token,
        SUM(failures) AS failures
    FROM runs
    GROUP BY mode, B, tau, scope, conditioning, topk, predictor, executor
    ORDER BY mode, B, tau, scope, conditioning, topk
"""


def find_latest_run(base: Optional[Path] = None) -> Path:
    """Most recently written bench run directory."""
    base = Path(base or get_output_dir()) / "bench"
    runs = sorted(base.glob("*/runs.csv"), key=lambda p: p.stat().st_mtime)
    if not runs:
        raise FileNotFoundError(f"No bench runs under {base}; run `bench` first")
    return runs[-1].parent


def summarize_runs(runs_csv: Path) -> pd.DataFrame:
    """Per-cell means over seeds."""
    runs = pd.read_csv(runs_csv, dtype={"config_hash": str, "cell": str})
    conn = duckdb.connect()
    try:
        conn.register("runs", runs)
        return conn.execute(CELL_SUMMARY_SQL).df()
    finally:
        conn.close()


def pareto_frontier(summary: pd.DataFrame) -> pd.DataFrame:
    """Cells no other cell beats on both validity and tokens per step."""
    keep = []
    for i, row in summary.iterrows():
        dominated = (
            (summary["validity_rate"] >= row["validity_rate"])
            & (summary["tokens_per_step"] >= row["tokens_per_step"])
            & ((summary["validity_rate"] > row["validity_rate"]) | (summary["tokens_per_step"] > row["tokens_per_step"]))
        ).any()
        if not dominated:
            keep.append(i)
    return summary.loc[keep].sort_values("tokens_per_step").reset_index(drop=True)


def generate_report(run_dir: Optional[Path] = None) -> List[Path]:
    """
    Write summary.csv and summary.md next to runs.csv.

    Args:
        run_dir: bench run directory; defaults to the latest run

    Returns:
        Paths of the written files
    """
    run_dir = Path(run_dir) if run_dir else find_latest_run()
    runs_csv = run_dir / "runs.csv"
    if not runs_csv.exists():
        raise FileNotFoundError(f"{runs_csv} not found")
    summary = summarize_runs(runs_csv)
    frontier = pareto_frontier(summary)

    csv_path = run_dir / "summary.csv"
    summary.to_csv(csv_path, index=False)

    env = Environment(loader=FileSystemLoader(str(Path(__file__).parent / "templates")), trim_blocks=True,
                      lstrip_blocks=True)
    markdown = env.get_template(TEMPLATE).render(
        run=run_dir.name,
        cells=summary.to_dict(orient="records"),
        frontier=frontier.to_dict(orient="records"),
    )
    md_path = run_dir / "summary.md"
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(markdown)
    log.info("Report for %s: %d cells, %d on the frontier", run_dir.name, len(summary), len(frontier))
    return [csv_path, md_path]


def main():
    """Summarize the latest bench run."""
    print("Generating bench summary...")
    print("=" * 60)
    try:
        for path in generate_report():
            print(f"Written: {path}")
    except FileNotFoundError as e:
        print(f"Error generating report: {e}")


if __name__ == "__main__":
    main()
