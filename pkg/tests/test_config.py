"""
Tests for run configuration merging and logging setup.
"""
import json
import logging
from pathlib import Path

import pytest

from src.config import (
    RunConfig,
    build_run_config,
    configure_logging,
    get_data_dir,
    load_config_file,
)


def test_defaults_without_sources(monkeypatch):
    """No file and no flags gives the dataclass defaults."""
    monkeypatch.delenv("SGALIGN_DATA_DIR", raising=False)
    config = build_run_config()
    assert config.data_dir == Path("./data")
    assert config.checkpoint is None
    assert config.k == 1
    assert config.gen.num_scenes == 40
    assert config.train.epochs == 50


def test_overrides_beat_file_values():
    file_values = {
        "k": 3,
        "out": "from_file",
        "gen": {"num_scenes": 5, "subscenes_per_scene": 2},
    }
    overrides = {"out": "from_flag", "gen": {"num_scenes": 7}}
    config = build_run_config(file_values, overrides)
    assert config.k == 3
    assert config.out == Path("from_flag")
    assert config.gen.num_scenes == 7
    assert config.gen.subscenes_per_scene == 2


def test_seed_flag_reaches_every_section():
    config = build_run_config({"train": {"seed": 9}}, {"seed": 5})
    assert config.seed == 5
    assert config.gen.seed == 5
    assert config.train.seed == 5
    assert config.ransac.seed == 5


def test_file_seed_keeps_explicit_section_seed():
    config = build_run_config({"seed": 4, "train": {"seed": 9}})
    assert config.gen.seed == 4
    assert config.ransac.seed == 4
    assert config.train.seed == 9


def test_json_lists_become_tuples():
    config = build_run_config(
        {"gen": {"overlap_range": [0.2, 0.8]}, "train": {"modalities": ["S", "R"]}}
    )
    assert config.gen.overlap_range == (0.2, 0.8)
    assert config.train.modalities == ("S", "R")


def test_unknown_keys_raise():
    with pytest.raises(ValueError, match="bogus"):
        build_run_config({"bogus": 1})
    with pytest.raises(ValueError, match="gen.'bogus'"):
        build_run_config({"gen": {"bogus": 1}})


def test_load_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"k": 2, "ransac": {"max_iterations": 100}}))
    config = build_run_config(load_config_file(path))
    assert config.k == 2
    assert config.ransac.max_iterations == 100

    path.write_text(json.dumps({"unknown": True}))
    with pytest.raises(ValueError):
        load_config_file(path)
    path.write_text("[1, 2]")
    with pytest.raises(ValueError, match="JSON object"):
        load_config_file(path)


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(sim_threshold=1.5)
    with pytest.raises(ValueError):
        RunConfig(overlap_threshold=-0.1)
    with pytest.raises(ValueError):
        RunConfig(k=0)
    with pytest.raises(ValueError):
        RunConfig(jobs=0)


def test_to_dict_stringifies_paths():
    payload = RunConfig(data_dir=Path("d"), checkpoint=Path("d/m.sgnn")).to_dict()
    assert payload["data_dir"] == "d"
    assert payload["checkpoint"] == str(Path("d/m.sgnn"))
    assert payload["out"] == "reports"
    assert payload["gen"]["num_scenes"] == 40


def test_data_dir_from_environment(monkeypatch):
    monkeypatch.setenv("SGALIGN_DATA_DIR", "/tmp/sgalign-data")
    assert get_data_dir() == Path("/tmp/sgalign-data")
    assert RunConfig().data_dir == Path("/tmp/sgalign-data")
    monkeypatch.delenv("SGALIGN_DATA_DIR")
    assert get_data_dir() == Path("./data")


def test_configure_logging_levels(monkeypatch, restore_root_logger):
    monkeypatch.setenv("SGALIGN_LOG_LEVEL", "warning")
    configure_logging()
    assert restore_root_logger.level == logging.WARNING
    configure_logging(verbosity=1)
    assert restore_root_logger.level == logging.DEBUG


def test_configure_logging_rejects_unknown_level(monkeypatch, restore_root_logger):
    monkeypatch.setenv("SGALIGN_LOG_LEVEL", "LOUD")
    with pytest.raises(ValueError, match="LOUD"):
        configure_logging()
