"""
Tests for the bench grid, its CSV artifacts and the report.
"""

import math
from dataclasses import asdict

import pandas as pd
import pytest

from app.config import DenoiserSection, ExecutorSection, parse_config
from app.experiments import grid_cells, load_language, prompt_for, read_records, run_experiment, write_records
from app.languages import gen_language
from app.models.registry import ModelRegistry, build_denoiser, build_executor, save_checkpoint
from app.training import pretrain_denoiser
from reports.aggregations import find_latest_run, generate_report, pareto_frontier, summarize_runs

SCOPE_DENOISER = DenoiserSection(d_model=16, n_layers=1, n_heads=2, steps=300, batch_size=16, log_every=1000)
SCOPE_EXECUTOR = ExecutorSection(d_model=16, n_layers=1, n_heads=2, max_block=2)


def bench_config(**bench):
    grid = {"mode": ["static"], "block_size": [2, 4, 8], "seeds": [0], "n_samples": 16}
    grid.update(bench)
    return parse_config({
        "language": {"kind": "paired-tokens", "L": 8, "n_pairs": 4, "n_train": 64, "n_val": 16},
        "bench": grid,
    })


class TestGrid:
    def test_block_sizes_must_divide_L(self):
        cells = grid_cells(bench_config(block_size=[2, 3, 4]))
        assert [c.B for c in cells] == [2, 4]

    def test_tau_only_varies_in_dynamic_mode(self):
        cells = grid_cells(bench_config(mode=["static", "dynamic"], block_size=[2], tau=[0.1, 0.5]))
        static = [c for c in cells if c.mode == "static"]
        dynamic = [c for c in cells if c.mode == "dynamic"]
        assert len(static) == 1
        assert math.isnan(static[0].tau)
        assert sorted(c.tau for c in dynamic) == [0.1, 0.5]

    def test_cell_names_are_unique(self):
        cells = grid_cells(bench_config(mode=["static", "dynamic", "token"], topk=[None, 1], seeds=[0, 1]))
        assert len({c.name for c in cells}) == len(cells)

    def test_prompt_fraction(self):
        corpus = gen_language("paired-tokens", 8, {"n_pairs": 4}, seed=0, n_train=8, n_val=4)
        prompt, reference = prompt_for(corpus, 5, 0.5)
        assert list(prompt) == list(corpus.val[1][:4])
        assert reference is not None
        empty, none = prompt_for(corpus, 0, 0.0)
        assert empty.size == 0 and none is None


class TestOracleBench:
    """Oracle predictor and oracle executor on paired-tokens."""

    def test_static_oracle_is_valid_and_commits_whole_blocks(self, output_dir):
        records, run_dir = run_experiment(bench_config(), registry=ModelRegistry())
        assert [r.B for r in records] == [2, 4, 8]
        for record in records:
            assert record.validity_rate == 1.0
            assert record.tokens_per_step == pytest.approx(record.B)
            assert record.failures == 0
        assert (run_dir / "timings.json").exists()
        assert (run_dir / "config.json").exists()
        assert len(list((run_dir / "traces").glob("*.csv"))) == 3

    def test_rerun_is_byte_identical(self, tmp_path):
        config = bench_config(mode=["static", "dynamic"], block_size=[2, 4], tau=[0.5])
        _, first = run_experiment(config, tmp_path / "a", registry=ModelRegistry())
        _, second = run_experiment(config, tmp_path / "b", registry=ModelRegistry())
        assert first.name == second.name
        assert (first / "runs.csv").read_bytes() == (second / "runs.csv").read_bytes()

    def test_records_round_trip(self, output_dir):
        records, run_dir = run_experiment(bench_config(block_size=[4]), registry=ModelRegistry())
        path = output_dir / "copy.csv"
        write_records(records, path)
        loaded = read_records(path)
        pd.testing.assert_frame_equal(
            pd.DataFrame([asdict(r) for r in loaded]),
            pd.DataFrame([asdict(r) for r in records]),
        )


class TestNeuralBench:
    """Checkpointed tiny models on sequences too long to enumerate."""

    @pytest.mark.slow
    def test_scope_binds_cost_not_throughput(self, tmp_path):
        """On 32 blocks a scope of 10 cuts executor calls while throughput barely moves."""
        config = parse_config({
            "language": {"kind": "paired-tokens", "L": 64, "n_pairs": 4, "n_train": 256, "n_val": 16},
            "denoiser": SCOPE_DENOISER.model_dump(),
            "executor": SCOPE_EXECUTOR.model_dump(),
            "decode": {"predictor": "neural", "executor": "neural"},
            "bench": {"mode": ["dynamic"], "block_size": [2], "tau": [0.5], "scope": [10, 50], "seeds": [0],
                      "n_samples": 8},
        })
        corpus = load_language(config)
        vocab = corpus.language.vocab
        denoiser = build_denoiser(vocab, 64, config.denoiser, seed=0)
        pretrain_denoiser(denoiser, corpus.train, config.denoiser, seed=0)
        save_checkpoint(denoiser, tmp_path / "denoiser.pt")
        save_checkpoint(build_executor(vocab, config.executor, seed=0), tmp_path / "executor_B2_soft.pt")

        records, _ = run_experiment(config, tmp_path, registry=ModelRegistry(tmp_path))
        by_scope = {r.scope: r for r in records}
        assert by_scope[10].failures == by_scope[50].failures == 0
        calls = {s: r.executor_calls_per_token for s, r in by_scope.items()}
        assert calls[50] > 1.5 * calls[10]
        throughput = {s: r.tokens_per_step for s, r in by_scope.items()}
        assert abs(throughput[10] - throughput[50]) <= 0.15 * throughput[10]


class TestReport:
    def test_report_files(self, output_dir):
        run_experiment(bench_config(seeds=[0, 1], n_samples=8), registry=ModelRegistry())
        run_dir = find_latest_run()
        csv_path, md_path = generate_report()
        assert csv_path == run_dir / "summary.csv"
        summary = pd.read_csv(csv_path)
        assert list(summary["B"]) == [2, 4, 8]
        assert list(summary["seeds"]) == [2, 2, 2]
        text = md_path.read_text(encoding="utf-8")
        assert run_dir.name in text
        assert "Pareto" in text

    def test_summary_averages_seeds(self, output_dir):
        _, run_dir = run_experiment(bench_config(block_size=[2], seeds=[0, 1, 2], n_samples=4),
                                    registry=ModelRegistry())
        summary = summarize_runs(run_dir / "runs.csv")
        assert len(summary) == 1
        assert summary.loc[0, "validity_rate"] == pytest.approx(1.0)

    def test_no_runs(self, output_dir):
        with pytest.raises(FileNotFoundError):
            find_latest_run()

    def test_pareto_frontier(self):
        summary = pd.DataFrame({
            "validity_rate": [1.0, 0.9, 0.5, 0.4],
            "tokens_per_step": [1.0, 2.0, 4.0, 3.0],
        })
        frontier = pareto_frontier(summary)
        assert list(frontier["tokens_per_step"]) == [1.0, 2.0, 4.0]
