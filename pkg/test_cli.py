"""
Tests for the rdrec command line: exit codes, artifacts of each stage and
the README's flag coverage.
"""

import argparse
import importlib
from pathlib import Path

import orjson
import pytest

from rdrec.main import build_parser, config_updates, main, run
from rdrec.utils.jsonl import read_json, read_jsonl

README = Path(__file__).parent / "README.md"


def create_run_config(tmp_path):
    """Config file for a very small end-to-end run"""
    path = tmp_path / "run.json"
    path.write_bytes(orjson.dumps({
        "distill": {"use_cache": False},
        "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "n_prompt_per_task": 2,
                  "whole_word_capacity": 16, "dropout": 0.0},
        "trainer": {"batch_size": 4, "steps_per_epoch": 2, "max_epochs": 2, "patience": 1, "n_negatives": 9},
        "beam": {"beam_width": 10, "max_len": 8},
    }))
    return path


def run_cli(tmp_path, *args):
    return main(["--log-level", "WARNING", "--work-dir", str(tmp_path / "run"), *args])


def test_stats_from_counts(tmp_path, capsys):
    assert run_cli(tmp_path, "stats", "--counts", "22363", "12101", "198502", "--json") == 0
    out = capsys.readouterr().out
    record = orjson.loads(out.strip().splitlines()[-1])
    assert record == {"users": 22363, "items": 12101, "reviews": 198502, "avg": 8.9, "density_percent": 0.0734}
    assert read_json(tmp_path / "run" / "reports" / "stats.json") == record
    manifest = read_json(tmp_path / "run" / "manifest.json")
    assert manifest["command"] == "stats"
    assert manifest["config"]["paths"]["work_dir"] == str(tmp_path / "run")


def test_stats_of_a_reviews_file(tmp_path, mock_reviews_path):
    assert run_cli(tmp_path, "stats", "--input", str(mock_reviews_path)) == 0
    display = read_json(tmp_path / "run" / "reports" / "stats.json")
    assert (display["users"], display["items"], display["reviews"]) == (3, 5, 9)


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["no-such-command"]) == 2
    assert main(["evaluate", "--task", "graph"]) == 2
    assert run_cli(tmp_path, "--set", "trainer.learning_rate=1", "stats", "--counts", "1", "1", "1") == 2
    assert "config: " in capsys.readouterr().err


def test_explain_without_user_or_item_is_a_usage_error(tmp_path, capsys):
    assert run_cli(tmp_path, "explain", "--task", "eg", "--item", "I0001") == 2
    assert "error: config: eg needs --user" in capsys.readouterr().err
    assert run_cli(tmp_path, "explain", "--task", "rg_attr", "--user", "U0001") == 2
    assert "error: config: rg_attr needs --item" in capsys.readouterr().err


def test_module_import_does_not_start_the_cli():
    module = importlib.import_module("rdrec.__main__")
    assert module.run is run


def test_missing_input_exits_1(tmp_path, capsys):
    assert run_cli(tmp_path, "stats", "--input", str(tmp_path / "absent.jsonl")) == 1
    assert "error: corpus: " in capsys.readouterr().err


def test_flags_map_to_config_keys():
    args = build_parser().parse_args(["--seed", "3", "distill", "--backend", "openai", "--no-cache",
                                      "--output", "q.jsonl", "--concurrency", "8"])
    updates = config_updates(args)
    assert updates["seed"] == 3
    assert updates["distill.kind"] == "openai"
    assert updates["distill.use_cache"] is False
    assert updates["distill.max_concurrency"] == 8
    assert updates["paths.quads"] == "q.jsonl"


def test_stage_by_stage_run(tmp_path, capsys):
    config = str(create_run_config(tmp_path))
    run = tmp_path / "run"
    reports = run / "reports"

    assert run_cli(tmp_path, "--config", config, "synth") == 0
    assert (run / "reviews.jsonl").exists()

    assert run_cli(tmp_path, "--config", config, "distill") == 0
    summary = read_json(reports / "distill_summary.json")
    assert summary["skipped"] == 0
    assert len(list(read_jsonl(run / "quads.jsonl"))) == summary["ok"] == summary["total"]

    assert run_cli(tmp_path, "--config", config, "prepare") == 0
    for name in ("splits.jsonl", "vocab.txt", "entities.json", "candidates.jsonl"):
        assert (run / name).exists(), name

    assert run_cli(tmp_path, "--config", config, "train", "--ratios", "1:1:1:3", "--max-epochs", "2") == 0
    trained = read_json(reports / "train_summary.json")
    assert Path(trained["best_checkpoint"]).exists()
    assert trained["epochs_run"] <= 2

    assert run_cli(tmp_path, "--config", config, "evaluate", "--task", "topn") == 0
    report = read_json(reports / "report_topn.json")
    assert 0.0 <= report["HR@10"] <= 1.0
    assert report["HR@10"] >= report["HR@5"] >= report["HR@1"]
    assert (reports / "ranked_topn_test.jsonl").exists()

    assert run_cli(tmp_path, "--config", config, "recommend", "--task", "seq", "--k", "3") == 0
    ranked = list(read_jsonl(reports / "ranked_seq_test.jsonl"))
    assert ranked and all(len(row["items"]) <= 3 for row in ranked)

    rankings = str(reports / "ranked_topn_test.jsonl")
    assert run_cli(tmp_path, "--config", config, "evaluate", "--rankings", rankings,
                   "--output", str(reports / "again.json")) == 0
    assert read_json(reports / "again.json") == report

    capsys.readouterr()
    assert run_cli(tmp_path, "--config", config, "explain", "--user", "U0001", "--item", "I0001",
                   "--task", "eg") == 0
    assert "eg" in capsys.readouterr().out
    assert run_cli(tmp_path, "--config", config, "explain", "--task", "rg_attr") == 2


@pytest.mark.slow
def test_pipeline_and_trials(tmp_path):
    config = str(create_run_config(tmp_path))
    reports = tmp_path / "run" / "reports"
    assert run_cli(tmp_path, "--config", config, "pipeline") == 0
    assert {"report_seq.json", "report_topn.json", "stats.json"} <= {p.name for p in reports.iterdir()}

    baseline = reports / "baseline.json"
    baseline.write_bytes(orjson.dumps({"values": {"HR@10": [0.0, 0.05]}, "seeds": [0, 1]}))
    assert run_cli(tmp_path, "--config", config, "evaluate", "--trials", "2", "--baseline", str(baseline)) == 0
    trials = read_json(reports / "trials_topn.json")
    assert trials["seeds"] == [0, 1]
    assert set(read_json(reports / "ttest_topn.json")) == {"HR@10"}


@pytest.mark.slow
def test_pipeline_is_byte_reproducible(tmp_path):
    config = str(create_run_config(tmp_path))
    runs = [tmp_path / "a", tmp_path / "b"]
    for run in runs:
        assert main(["--log-level", "WARNING", "--work-dir", str(run), "--config", config, "pipeline"]) == 0
    for name in ("checkpoints/best.ckpt", "reports/ranked_topn_test.jsonl", "reports/ranked_seq_test.jsonl",
                 "reports/report_topn.json", "reports/report_seq.json", "quads.jsonl", "vocab.txt"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


def _long_flags(parser):
    flags = set()
    for action in parser._actions:
        flags.update(opt for opt in action.option_strings if opt.startswith("--"))
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                flags.add(name)
                flags.update(_long_flags(sub))
    return flags


def test_readme_lists_every_flag():
    text = README.read_text(encoding="utf-8")
    missing = sorted(flag for flag in _long_flags(build_parser()) if flag not in text)
    assert missing == []
