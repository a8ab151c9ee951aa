"""Command-line entry point: `sgalign <command> [options]`."""
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src import report_generation as reports
from src.alignment import alignment_report, evaluate_alignments
from src.config import RunConfig, build_run_config, configure_logging, load_config_file
from src.datagen import (
    GraphCache,
    generate_dataset,
    load_manifest,
    load_pairs,
    overlap_histogram,
    split_by_parent,
    write_dataset,
)
from src.encoders import ModelParams, parse_modalities
from src.evaluation import (
    DECISION_COLUMNS,
    align_all,
    overlap_benchmark_items,
    register_all,
    registration_buckets,
    registration_rows,
    run_evaluation,
)
from src.mosaicking import MosaicConfig, MosaicError, mosaic, write_mosaic
from src.registration import overlap_benchmark
from src.scenegraph import SceneGraph, load_scene_graph
from src.training import load_model, save_model, train

logger = logging.getLogger(__name__)

MOSAIC_COLUMNS = [
    "group",
    "origin",
    "n_fragments",
    "n_registered",
    "acc",
    "comp",
    "precision",
    "recall",
    "f1",
]


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Parses the command line arguments. Also produces the help message.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, default=None, help="JSON run configuration file"
    )
    common.add_argument(
        "--data-dir",
        type=Path,
        default=None,
        help="Dataset directory (default $SGALIGN_DATA_DIR)",
    )
    common.add_argument(
        "--out", type=Path, default=None, help="Output directory for reports"
    )
    common.add_argument(
        "--checkpoint",
        type=Path,
        default=None,
        help="Model checkpoint (default <data-dir>/model.sgnn)",
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Seed for every random stream"
    )
    common.add_argument(
        "--jobs", type=int, default=None, help="Parallel workers across scene pairs"
    )
    common.add_argument(
        "--sim-threshold", type=float, default=None, help="Node similarity threshold"
    )
    common.add_argument(
        "--overlap-threshold",
        type=float,
        default=None,
        help="Overlap decision threshold on xi",
    )
    common.add_argument(
        "--k", type=int, default=None, help="Matches reported per source node"
    )
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="Debug logging"
    )

    parser = argparse.ArgumentParser(
        prog="sgalign", description="3D scene graph alignment toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser(
        "gen", parents=[common], help="Generate the synthetic benchmark"
    )
    gen.add_argument(
        "--num-scenes", type=int, default=None, help="Number of parent scenes"
    )
    gen.add_argument(
        "--subscenes-per-scene",
        type=int,
        default=None,
        help="Sub-scenes cut from each scene",
    )

    trainer = sub.add_parser("train", parents=[common], help="Train the encoders")
    trainer.add_argument("--epochs", type=int, default=None, help="Training epochs")
    trainer.add_argument(
        "--modalities", type=str, default=None, help="Modality subset, e.g. P,S,R,A"
    )

    sub.add_parser("align", parents=[common], help="Align the test pairs")
    sub.add_parser("register", parents=[common], help="Register the test pairs")
    mosaicker = sub.add_parser(
        "mosaic", parents=[common], help="Mosaic scene fragments"
    )
    mosaicker.add_argument(
        "--fragments",
        type=Path,
        nargs="+",
        default=None,
        help="Scene-graph files (default: test sub-scenes per parent)",
    )
    evaluator = sub.add_parser(
        "eval", parents=[common], help="Run every evaluation workflow"
    )
    evaluator.add_argument(
        "--plots", action="store_true", help="Also write SVG bar charts"
    )
    sub.add_parser(
        "bench-overlap", parents=[common], help="Benchmark the overlap decision"
    )
    return parser.parse_args(argv)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "data_dir": args.data_dir,
        "out": args.out,
        "checkpoint": args.checkpoint,
        "seed": args.seed,
        "jobs": args.jobs,
        "sim_threshold": args.sim_threshold,
        "overlap_threshold": args.overlap_threshold,
        "k": args.k,
    }
    overrides: Dict[str, Any] = {
        key: value for key, value in flags.items() if value is not None
    }
    gen = {
        "num_scenes": getattr(args, "num_scenes", None),
        "subscenes_per_scene": getattr(args, "subscenes_per_scene", None),
    }
    gen = {key: value for key, value in gen.items() if value is not None}
    if gen:
        overrides["gen"] = gen
    train_section: Dict[str, Any] = {}
    if getattr(args, "epochs", None) is not None:
        train_section["epochs"] = args.epochs
    if getattr(args, "modalities", None) is not None:
        train_section["modalities"] = parse_modalities(args.modalities)
    if train_section:
        overrides["train"] = train_section
    return overrides


def _checkpoint(config: RunConfig) -> Path:
    return config.checkpoint or config.data_dir / "model.sgnn"


def _load_model(config: RunConfig) -> ModelParams:
    checkpoint = _checkpoint(config)
    if not checkpoint.exists():
        raise FileNotFoundError(
            f"checkpoint not found: {checkpoint} (run `sgalign train` first)"
        )
    return load_model(checkpoint)


def _manifest(config: RunConfig):
    path = config.data_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run `sgalign gen` first)")
    return load_manifest(path)


def _split(config: RunConfig):
    return split_by_parent(_manifest(config), seed=config.seed)


def cmd_gen(config: RunConfig) -> int:
    dataset = generate_dataset(config.gen)
    write_dataset(dataset, config.data_dir)
    histogram = overlap_histogram([pair.overlap for pair in dataset.pairs])
    summary = {
        "n_scenes": len(dataset.scenes),
        "n_subscenes": len(dataset.subscenes),
        "n_pairs": len(dataset.pairs),
        "skipped_subscenes": dataset.skipped_subscenes,
        "overlap_histogram": histogram,
        "config": config.to_dict()["gen"],
    }
    reports.write_json(summary, config.data_dir / "gen_summary.json")
    print(
        f"{len(dataset.pairs)} pairs from {len(dataset.scenes)} scenes "
        f"written to {config.data_dir}"
    )
    print("overlap histogram (%):")
    for bucket, count in histogram.items():
        print(f"  {bucket:>7}: {count}")
    return 0


def cmd_train(config: RunConfig) -> int:
    train_entries, test_entries = _split(config)
    cache = GraphCache(config.data_dir)
    pairs = load_pairs(config.data_dir, train_entries, cache)
    logger.info(f"training on {len(pairs)} pairs ({len(test_entries)} held out)")
    result = train(pairs, config.train)
    checkpoint = _checkpoint(config)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.params, checkpoint, config.train)
    reports.write_table(result.history, config.out / "training_log.csv")
    return 0


def cmd_align(config: RunConfig) -> int:
    params = _load_model(config)
    _, test_entries = _split(config)
    pairs = load_pairs(config.data_dir, test_entries)
    alignments = align_all(params, pairs, config.sim_threshold, config.jobs)
    records = [
        alignment_report(a, config.k, config.overlap_threshold) for a in alignments
    ]
    reports.write_json(records, config.out / "alignment.json")
    metrics = evaluate_alignments(alignments)
    reports.write_json(metrics.as_dict(), config.out / "alignment_metrics.json")
    reports.write_confusion(metrics.confusion, config.out / "confusion.csv")
    return 0


def cmd_register(config: RunConfig) -> int:
    params = _load_model(config)
    _, test_entries = _split(config)
    pairs = load_pairs(config.data_dir, test_entries)
    overlaps = {pair.pair_id: pair.overlap for pair in pairs}
    alignments = align_all(params, pairs, config.sim_threshold, config.jobs)
    registrations = register_all(
        alignments,
        config.ransac,
        config.sim_threshold,
        config.overlap_threshold,
        config.jobs,
    )
    out = config.out
    reports.write_json([r.as_dict() for r in registrations], out / "registration.json")
    reports.write_table(
        registration_rows(registrations, overlaps), out / "registration.csv"
    )
    reports.write_table(
        registration_buckets(registrations, overlaps), out / "registration_buckets.csv"
    )
    return 0


def _default_fragments(config: RunConfig) -> Dict[str, List[SceneGraph]]:
    _, test_entries = _split(config)
    cache = GraphCache(config.data_dir)
    groups: Dict[str, Dict[str, SceneGraph]] = {}
    for entry in test_entries:
        members = groups.setdefault(entry.parent, {})
        for path in (entry.source_path, entry.target_path):
            graph = cache.get(path)
            members[graph.scene_id] = graph
    return {
        parent: [members[k] for k in sorted(members)]
        for parent, members in sorted(groups.items())
    }


def cmd_mosaic(
    config: RunConfig, fragment_paths: Optional[Sequence[Path]] = None
) -> int:
    params = _load_model(config)
    cfg = MosaicConfig(config.sim_threshold, config.overlap_threshold, config.ransac)
    if fragment_paths:
        groups = {"fragments": [load_scene_graph(path) for path in fragment_paths]}
    else:
        groups = _default_fragments(config)
    rows = []
    for name, fragments in groups.items():
        row: Dict[str, Any] = {
            "group": name,
            "origin": None,
            "n_fragments": len(fragments),
            "n_registered": 0,
        }
        try:
            result = mosaic(fragments, params, cfg)
        except MosaicError as exc:
            logger.warning(f"mosaic {name}: {exc}")
            rows.append(row)
            continue
        write_mosaic(result, config.out / "mosaic" / name)
        row.update(origin=result.origin_id, n_registered=len(result.registered))
        row.update(result.metrics or {})
        rows.append(row)
    reports.write_table(
        pd.DataFrame(rows, columns=MOSAIC_COLUMNS), config.out / "mosaic_summary.csv"
    )
    return 0


def _write_charts(report, charts: Path) -> None:
    reports.create_metric_chart(
        report.alignment_buckets,
        "bucket",
        ["mrr", "hits@1"],
        "Node matching per overlap range",
        charts / "alignment_buckets.svg",
    )
    reports.create_metric_chart(
        report.noise,
        "scenario",
        ["mrr", "hits@1"],
        "Node matching under semantic noise",
        charts / "noise_scenarios.svg",
    )
    reports.create_metric_chart(
        report.sgar,
        "strategy",
        ["sgar"],
        "Scene graph alignment recall",
        charts / "sgar.svg",
    )


def cmd_eval(config: RunConfig, plots: bool = False) -> int:
    params = _load_model(config)
    _, test_entries = _split(config)
    cache = GraphCache(config.data_dir)
    pairs = load_pairs(config.data_dir, test_entries, cache)
    report = run_evaluation(
        params,
        pairs,
        cache,
        config.ransac,
        config.sim_threshold,
        config.overlap_threshold,
        config.seed,
        config.jobs,
    )
    out = config.out
    reports.write_json(report.summary(), out / "eval_summary.json")
    reports.write_table(report.alignment_buckets, out / "alignment_buckets.csv")
    reports.write_table(report.sgar, out / "sgar.csv")
    reports.write_confusion(report.confusion, out / "confusion.csv")
    reports.write_table(report.noise, out / "noise_scenarios.csv")
    reports.write_table(report.changed, out / "changed_scenes.csv")
    reports.write_table(report.registration, out / "registration.csv")
    reports.write_table(
        report.registration_buckets, out / "registration_buckets.csv"
    )
    reports.write_table(report.overlap, out / "overlap_benchmark.csv")
    reports.write_table(report.overlap_decisions, out / "overlap_decisions.csv")
    reports.write_json(report.timing, out / "overlap_timing.json")
    if plots:
        _write_charts(report, out / "charts")
    return 0


def cmd_bench_overlap(config: RunConfig) -> int:
    params = _load_model(config)
    _, test_entries = _split(config)
    pairs = load_pairs(config.data_dir, test_entries)
    summary, decisions = overlap_benchmark(
        params,
        overlap_benchmark_items(pairs),
        config.sim_threshold,
        config.overlap_threshold,
    )
    columns = ["precision", "recall", "f1", "n"]
    table = pd.DataFrame([{key: summary[key] for key in columns}], columns=columns)
    table["matchability_baseline"] = "unavailable"
    out = config.out
    reports.write_table(table, out / "overlap_benchmark.csv")
    reports.write_table(
        pd.DataFrame(decisions, columns=DECISION_COLUMNS),
        out / "overlap_decisions.csv",
    )
    timing = {"mean_ms": summary["mean_ms"], "n": summary["n"]}
    reports.write_json(timing, out / "overlap_timing.json")
    return 0


def run(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config is not None else None
    config = build_run_config(file_values, _overrides(args))
    if args.command == "gen":
        return cmd_gen(config)
    if args.command == "train":
        return cmd_train(config)
    if args.command == "align":
        return cmd_align(config)
    if args.command == "register":
        return cmd_register(config)
    if args.command == "mosaic":
        return cmd_mosaic(config, args.fragments)
    if args.command == "eval":
        return cmd_eval(config, args.plots)
    return cmd_bench_overlap(config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        configure_logging(args.verbose)
        return run(args)
    except Exception as exc:
        logger.error(f"{args.command} failed: {exc}")
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
