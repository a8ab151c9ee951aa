"""End-to-end tests for the sgalign command line."""
import json

import pandas as pd
import pytest

from src.cli import main, parse_args
from src.report_generation import read_json


@pytest.fixture
def run_files(tmp_path):
    """A config file with the tiny benchmark, plus data and report directories."""
    config = {
        "gen": {
            "seed": 11,
            "num_scenes": 2,
            "objects_per_scene": [5, 7],
            "points_per_object_raw": [200, 400],
            "subscenes_per_scene": 3,
            "overlap_range": [0.05, 1.0],
            "view_extent": [4.0, 5.0],
            "min_visible_points": 16,
        },
        "ransac": {"max_iterations": 200},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return path, tmp_path / "data", tmp_path / "reports"


def test_parse_args_subcommands():
    args = parse_args(["train", "--epochs", "3", "--modalities", "S,A", "-vv"])
    assert args.command == "train"
    assert args.epochs == 3
    assert args.verbose == 2
    with pytest.raises(SystemExit):
        parse_args(["unknown"])


def test_missing_checkpoint_returns_error(tmp_path, restore_root_logger):
    args = ["align", "--data-dir", str(tmp_path), "--out", str(tmp_path / "out")]
    assert main(args) == 1


def test_unknown_config_key_returns_error(tmp_path, restore_root_logger):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"gen": {"colour": "red"}}))
    assert main(["gen", "--config", str(path), "--data-dir", str(tmp_path)]) == 1
    assert not (tmp_path / "manifest.json").exists()


@pytest.mark.slow
@pytest.mark.integration
def test_gen_train_and_evaluate(run_files, restore_root_logger):
    config, data_dir, out = run_files
    common = ["--config", str(config), "--data-dir", str(data_dir), "--out", str(out)]

    assert main(["gen", *common]) == 0
    summary = read_json(data_dir / "gen_summary.json")
    assert summary["n_scenes"] == 2
    assert summary["config"]["num_scenes"] == 2
    assert sum(summary["overlap_histogram"].values()) == summary["n_pairs"]

    assert main(["train", *common, "--epochs", "1", "--modalities", "S,R,A"]) == 0
    assert (data_dir / "model.sgnn").exists()
    assert (data_dir / "model.json").exists()
    assert len(pd.read_csv(out / "training_log.csv")) == 1

    assert main(["align", *common, "--k", "2"]) == 0
    alignments = read_json(out / "alignment.json")
    assert alignments
    pair_ids = [a["pair_id"] for a in alignments]
    assert pair_ids == sorted(pair_ids)
    assert all(0.0 <= a["metrics"]["xi"] <= 1.0 for a in alignments)
    assert "mrr" in read_json(out / "alignment_metrics.json")

    assert main(["register", *common]) == 0
    assert (out / "registration.csv").exists()
    assert list(pd.read_csv(out / "registration_buckets.csv")["bucket"])[0] == "all"

    assert main(["mosaic", *common]) == 0
    assert (out / "mosaic_summary.csv").exists()

    assert main(["eval", *common, "--plots", "--jobs", "2"]) == 0
    for name in (
        "eval_summary.json",
        "alignment_buckets.csv",
        "sgar.csv",
        "confusion.csv",
        "noise_scenarios.csv",
        "changed_scenes.csv",
        "registration.csv",
        "overlap_benchmark.csv",
        "overlap_decisions.csv",
        "overlap_timing.json",
        "charts/sgar.svg",
    ):
        assert (out / name).exists(), name

    assert main(["bench-overlap", *common]) == 0
    benchmark = pd.read_csv(out / "overlap_benchmark.csv")
    assert benchmark["matchability_baseline"].iloc[0] == "unavailable"


@pytest.mark.slow
@pytest.mark.integration
def test_eval_summary_is_reproducible(run_files, restore_root_logger):
    config, data_dir, out = run_files
    common = ["--config", str(config), "--data-dir", str(data_dir)]
    assert main(["gen", *common]) == 0
    assert main(["train", *common, "--epochs", "0", "--out", str(out / "train")]) == 0

    assert main(["eval", *common, "--out", str(out / "first")]) == 0
    assert main(["eval", *common, "--out", str(out / "second"), "--jobs", "3"]) == 0
    for name in ("eval_summary.json", "alignment_buckets.csv", "registration.csv"):
        first = (out / "first" / name).read_bytes()
        assert first == (out / "second" / name).read_bytes()
