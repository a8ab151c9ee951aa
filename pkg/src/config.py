"""Run configuration and logging setup for sgalign."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from src.alignment import DEFAULT_OVERLAP_THRESHOLD, DEFAULT_SIM_THRESHOLD
from src.datagen import GenConfig
from src.registration import RansacConfig
from src.training import TrainConfig

logger = logging.getLogger(__name__)

load_dotenv()

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
SECTIONS = {"gen": GenConfig, "train": TrainConfig, "ransac": RansacConfig}


def get_data_dir() -> Path:
    """Dataset directory from SGALIGN_DATA_DIR (default ./data)."""
    return Path(os.getenv("SGALIGN_DATA_DIR", "./data"))


def configure_logging(verbosity: int = 0) -> None:
    """
    Configure the root logger once per process.

    Verbosity 0 uses SGALIGN_LOG_LEVEL (default INFO); -v forces DEBUG.
    """
    if verbosity > 0:
        level = logging.DEBUG
    else:
        name = os.getenv("SGALIGN_LOG_LEVEL", "INFO").upper()
        level = getattr(logging, name, None)
        if not isinstance(level, int):
            raise ValueError(f"SGALIGN_LOG_LEVEL: unknown level {name!r}")
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


@dataclass
class RunConfig:
    """Merged view of every configurable knob of a CLI run."""

    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    data_dir: Path = field(default_factory=get_data_dir)
    checkpoint: Optional[Path] = None
    out: Path = Path("reports")
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    k: int = 1
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not -1.0 <= self.sim_threshold <= 1.0:
            raise ValueError(
                f"sim_threshold must lie in [-1, 1], got {self.sim_threshold}"
            )
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError(
                f"overlap_threshold must lie in [0, 1], got {self.overlap_threshold}"
            )
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        for key in ("data_dir", "checkpoint", "out"):
            payload[key] = None if payload[key] is None else str(payload[key])
        return payload


_PATH_KEYS = {"data_dir", "checkpoint", "out"}


def _check_keys(section: str, values: Mapping[str, Any], allowed) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ValueError(f"unknown configuration key {section}{unknown[0]!r}")


def _coerce_section(cls, values: Mapping[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    section = next(k for k, v in SECTIONS.items() if v is cls)
    _check_keys(f"{section}.", values, names)
    # JSON has no tuples
    return {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a JSON run configuration, rejecting unknown keys."""
    with open(path) as handle:
        payload = json.load(handle)
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    top_level = {f.name for f in fields(RunConfig)}
    _check_keys("", payload, top_level)
    return payload


def build_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Merge configuration sources: CLI overrides > config file > environment > defaults.

    `overrides` holds only the flags the user actually passed. A `seed`
    override propagates into the gen, train and ransac sections.
    """
    merged: Dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key in SECTIONS:
                section = merged.setdefault(key, {})
                section.update(_coerce_section(SECTIONS[key], value))
            else:
                merged[key] = value
    _check_keys("", merged, {f.name for f in fields(RunConfig)})

    kwargs: Dict[str, Any] = {}
    for key, value in merged.items():
        if key in SECTIONS:
            continue
        kwargs[key] = Path(value) if key in _PATH_KEYS and value is not None else value

    seed = kwargs.get("seed", 0)
    for key, cls in SECTIONS.items():
        section = dict(merged.get(key, {}))
        if "seed" in kwargs:
            section.setdefault("seed", seed)
            if overrides and "seed" in overrides:
                section["seed"] = seed
        kwargs[key] = cls(**section)
    config = RunConfig(**kwargs)
    logger.debug(f"run configuration: {config.to_dict()}")
    return config

