"""
Evaluation workflows behind `sgalign eval`.

Every table is built from pairs in pair-id order so that reports are
byte-identical across runs and `--jobs` settings.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from src.alignment import (
    HITS_K,
    SGAR_STRATEGIES,
    PairAlignment,
    align_pair,
    anchor_ranks,
    evaluate_alignments,
    hits_from_ranks,
    mrr_from_ranks,
)
from src.datagen import (
    NOISE_SCENARIOS,
    GraphCache,
    ScenePair,
    extract_anchors,
    inject_noise,
    random_noise_spec,
    relative_transform,
    stable_hash,
)
from src.encoders import ModelParams
from src.geometry import RigidTransform
from src.registration import (
    PairRegistration,
    RansacConfig,
    fmr,
    overlap_benchmark,
    register_alignment,
)
from src.scenegraph import SceneGraph

logger = logging.getLogger(__name__)

ALIGNMENT_BUCKETS = (
    ("10-30", 10, 30),
    ("30-40", 30, 40),
    ("40-50", 40, 50),
    ("50-60", 50, 60),
    ("60-", 60, None),
)
REGISTRATION_BUCKETS = (("10-30", 10, 30), ("30-60", 30, 60), ("60-", 60, None))
CHANGE_SCENARIO = "remove_both"
CHANGED_SCENES = (
    "local_on_full_map",
    "full_map_with_changes",
    "local_on_local_with_changes",
)
DECISION_COLUMNS = ["source", "target", "label", "xi", "predicted"]
REGISTRATION_COLUMNS = [
    "pair_id",
    "overlap",
    "decision",
    "xi",
    "rre_deg",
    "rte_m",
    "chamfer",
    "rmse",
    "recalled",
    "inlier_ratio",
    "n_correspondences",
]

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """Order-preserving map, threaded when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def bucket_of(overlap: float, buckets) -> Optional[str]:
    """Label of the bucket holding an overlap fraction; None below the first bucket."""
    percent = overlap * 100.0
    for label, low, high in buckets:
        if percent >= low and (high is None or percent < high):
            return label
    return None


def _rank_row(alignments: Sequence[PairAlignment]) -> Dict[str, float]:
    ranks = (
        np.concatenate([anchor_ranks(a.result, a.anchors) for a in alignments])
        if alignments
        else np.zeros(0, dtype=np.int64)
    )
    row = {
        "n_pairs": len(alignments),
        "n_anchors": int(ranks.size),
        "mrr": mrr_from_ranks(ranks),
    }
    row.update({f"hits@{k}": hits_from_ranks(ranks, k) for k in HITS_K})
    return row


def rank_columns() -> List[str]:
    return ["n_pairs", "n_anchors", "mrr"] + [f"hits@{k}" for k in HITS_K]


def align_all(
    params: ModelParams, pairs: Sequence[ScenePair], sim_threshold: float, jobs: int = 1
) -> List[PairAlignment]:
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    return parallel_map(
        lambda pair: align_pair(params, pair, sim_threshold), ordered, jobs
    )


def alignment_buckets(
    alignments: Sequence[PairAlignment], overlaps: Dict[str, float]
) -> pd.DataFrame:
    """Node-matching metrics per overlap range; pairs below 10% only count overall."""
    rows = []
    for label, _, _ in ALIGNMENT_BUCKETS:
        members = [
            a
            for a in alignments
            if bucket_of(overlaps[a.pair_id], ALIGNMENT_BUCKETS) == label
        ]
        rows.append({"bucket": label, **_rank_row(members)})
    return pd.DataFrame(rows, columns=["bucket"] + rank_columns())


def sgar_table(alignments: Sequence[PairAlignment]) -> pd.DataFrame:
    metrics = evaluate_alignments(alignments)
    rows = [{"strategy": s, "sgar": metrics.sgar[s]} for s in SGAR_STRATEGIES]
    return pd.DataFrame(rows, columns=["strategy", "sgar"])


def _noisy_pair_alignment(
    params: ModelParams,
    pair: ScenePair,
    scenario: str,
    seed: int,
    sim_threshold: float,
) -> PairAlignment:
    stream = [seed, stable_hash(pair.pair_id), NOISE_SCENARIOS.index(scenario)]
    rng = np.random.default_rng(stream)
    source = inject_noise(pair.source, random_noise_spec(scenario, seed, rng))
    target = inject_noise(pair.target, random_noise_spec(scenario, seed, rng))
    return align_pair(params, pair, sim_threshold, source=source, target=target)


def noise_sweep(
    params: ModelParams,
    pairs: Sequence[ScenePair],
    seed: int,
    sim_threshold: float,
    jobs: int = 1,
) -> pd.DataFrame:
    """Node-matching metrics with each semantic-noise scenario on both graphs."""
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    clean = align_all(params, ordered, sim_threshold, jobs)
    rows = [{"scenario": "none", **_rank_row(clean)}]
    for scenario in NOISE_SCENARIOS:
        alignments = parallel_map(
            lambda pair: _noisy_pair_alignment(
                params, pair, scenario, seed, sim_threshold
            ),
            ordered,
            jobs,
        )
        rows.append({"scenario": scenario, **_rank_row(alignments)})
        logger.info(f"noise scenario {scenario}: MRR {rows[-1]['mrr']:.3f}")
    return pd.DataFrame(rows, columns=["scenario"] + rank_columns())


# --- changed scenes ---------------------------------------------------------


def _changed(graph: SceneGraph, seed: int) -> SceneGraph:
    rng = np.random.default_rng([seed, stable_hash(graph.scene_id), 7])
    return inject_noise(graph, random_noise_spec(CHANGE_SCENARIO, seed, rng))


def _anchored_pair(
    pair_id: str,
    source: SceneGraph,
    target: SceneGraph,
    anchors_from: Tuple[SceneGraph, SceneGraph],
    gt: RigidTransform,
) -> ScenePair:
    return ScenePair(pair_id, source, target, extract_anchors(*anchors_from), gt, 1.0)


def changed_scene_pairs(
    pairs: Sequence[ScenePair], cache: GraphCache, seed: int
) -> Dict[str, List[ScenePair]]:
    """
    Build the three changed-scene scenarios from test pairs.

    local_on_full_map pairs every test sub-scene with its full parent scene;
    full_map_with_changes pairs each parent with a changed copy of itself;
    local_on_local_with_changes pairs each test pair's source with a changed target.
    """
    subscenes: Dict[str, SceneGraph] = {}
    for pair in pairs:
        subscenes.setdefault(pair.source.scene_id, pair.source)
        subscenes.setdefault(pair.target.scene_id, pair.target)
    parents: Dict[str, SceneGraph] = {}
    for graph in subscenes.values():
        if graph.lineage not in parents:
            parents[graph.lineage] = cache.get(f"scenes/{graph.lineage}.json")

    local_on_full = []
    for sid, graph in sorted(subscenes.items()):
        parent = parents[graph.lineage]
        local_on_full.append(
            _anchored_pair(
                f"{sid}__{graph.lineage}",
                graph,
                parent,
                (graph, parent),
                relative_transform(graph, parent),
            )
        )
    full_changed = [
        _anchored_pair(
            f"{pid}__{pid}_changed",
            parent,
            _changed(parent, seed),
            (parent, parent),
            RigidTransform.identity(),
        )
        for pid, parent in sorted(parents.items())
    ]
    local_changed = [
        _anchored_pair(
            f"{p.pair_id}_changed",
            p.source,
            _changed(p.target, seed),
            (p.source, p.target),
            p.gt_transform,
        )
        for p in sorted(pairs, key=lambda p: p.pair_id)
    ]
    return dict(zip(CHANGED_SCENES, (local_on_full, full_changed, local_changed)))


def changed_scene_table(
    params: ModelParams,
    scenarios: Dict[str, List[ScenePair]],
    sim_threshold: float,
    jobs: int = 1,
) -> pd.DataFrame:
    rows = []
    for name in CHANGED_SCENES:
        alignments = align_all(params, scenarios.get(name, []), sim_threshold, jobs)
        rows.append({"scenario": name, **_rank_row(alignments)})
    return pd.DataFrame(rows, columns=["scenario"] + rank_columns())


# --- registration -----------------------------------------------------------


def registration_rows(
    registrations: Sequence[PairRegistration], overlaps: Dict[str, float]
) -> pd.DataFrame:
    rows = []
    for registration in registrations:
        record = registration.as_dict()
        record.pop("transform")
        record["overlap"] = overlaps[registration.pair_id]
        rows.append(record)
    return pd.DataFrame(rows, columns=REGISTRATION_COLUMNS)


def _registration_summary(
    registrations: Sequence[PairRegistration],
) -> Dict[str, Optional[float]]:
    registered = [r for r in registrations if r.decision == "overlap"]

    def mean_of(key: str) -> Optional[float]:
        values = [r.metrics[key] for r in registered if np.isfinite(r.metrics[key])]
        return float(np.mean(values)) if values else None

    recalled = [bool(r.metrics.get("recalled", False)) for r in registrations]
    return {
        "n_pairs": len(registrations),
        "n_registered": len(registered),
        "rre_deg": mean_of("rre"),
        "rte_m": mean_of("rte"),
        "chamfer": mean_of("chamfer"),
        "rmse": mean_of("rmse"),
        "recall": float(np.mean(recalled)) if recalled else 0.0,
        "fmr": fmr([r.inlier_ratio for r in registrations]),
    }


def registration_buckets(
    registrations: Sequence[PairRegistration], overlaps: Dict[str, float]
) -> pd.DataFrame:
    rows = [{"bucket": "all", **_registration_summary(registrations)}]
    for label, _, _ in REGISTRATION_BUCKETS:
        members = [
            r
            for r in registrations
            if bucket_of(overlaps[r.pair_id], REGISTRATION_BUCKETS) == label
        ]
        rows.append({"bucket": label, **_registration_summary(members)})
    return pd.DataFrame(rows)


def register_all(
    alignments: Sequence[PairAlignment],
    cfg: RansacConfig,
    sim_threshold: float,
    overlap_threshold: float,
    jobs: int = 1,
) -> List[PairRegistration]:
    return parallel_map(
        lambda a: register_alignment(a, cfg, sim_threshold, overlap_threshold),
        alignments,
        jobs,
    )


# --- overlap benchmark ------------------------------------------------------


def overlap_benchmark_items(
    pairs: Sequence[ScenePair],
) -> List[Tuple[SceneGraph, SceneGraph, bool]]:
    """
    Balanced overlapping / non-overlapping set.

    Each overlapping pair contributes one negative: its source against the
    first sub-scene (by id) of the next parent in sorted order.
    """
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    by_parent: Dict[str, List[SceneGraph]] = {}
    for pair in ordered:
        for graph in (pair.source, pair.target):
            members = by_parent.setdefault(graph.lineage, [])
            if all(g.scene_id != graph.scene_id for g in members):
                members.append(graph)
    parents = sorted(by_parent)
    items = [(p.source, p.target, True) for p in ordered]
    if len(parents) < 2:
        logger.warning("overlap benchmark: one parent scene, no negative pairs")
        return items
    for pair in ordered:
        other = parents[(parents.index(pair.source.lineage) + 1) % len(parents)]
        negative = min(by_parent[other], key=lambda g: g.scene_id)
        items.append((pair.source, negative, False))
    return items


@dataclass
class EvaluationReport:
    alignment: Dict[str, float]
    alignment_buckets: pd.DataFrame
    sgar: pd.DataFrame
    confusion: pd.DataFrame
    noise: pd.DataFrame
    changed: pd.DataFrame
    registration: pd.DataFrame
    registration_buckets: pd.DataFrame
    overlap: pd.DataFrame
    overlap_decisions: pd.DataFrame
    timing: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> Dict:
        """Deterministic part of the report (timing excluded)."""
        return {
            "alignment": self.alignment,
            "alignment_buckets": self.alignment_buckets.to_dict(orient="records"),
            "sgar": self.sgar.to_dict(orient="records"),
            "noise": self.noise.to_dict(orient="records"),
            "changed_scenes": self.changed.to_dict(orient="records"),
            "registration": self.registration_buckets.to_dict(orient="records"),
            "overlap_benchmark": self.overlap.to_dict(orient="records"),
        }


def run_evaluation(
    params: ModelParams,
    pairs: Sequence[ScenePair],
    cache: Optional[GraphCache],
    ransac: RansacConfig,
    sim_threshold: float,
    overlap_threshold: float,
    seed: int = 0,
    jobs: int = 1,
) -> EvaluationReport:
    """
    Every evaluation workflow over the given test pairs.

    Changed-scene scenarios need the parent scenes from `cache`; without a
    cache they are reported with zero rows.
    """
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    overlaps = {p.pair_id: p.overlap for p in ordered}
    alignments = align_all(params, ordered, sim_threshold, jobs)
    metrics = evaluate_alignments(alignments)
    logger.info(
        f"alignment over {metrics.n_pairs} pairs: MRR {metrics.mrr:.3f}, "
        f"Hits@1 {metrics.hits[1]:.3f}"
    )

    registrations = register_all(
        alignments, ransac, sim_threshold, overlap_threshold, jobs
    )
    scenarios = changed_scene_pairs(ordered, cache, seed) if cache is not None else {}
    summary, decisions = overlap_benchmark(
        params, overlap_benchmark_items(ordered), sim_threshold, overlap_threshold
    )
    overlap = pd.DataFrame(
        [
            {
                "method": "alignment_xi",
                "precision": summary["precision"],
                "recall": summary["recall"],
                "f1": summary["f1"],
                "n": summary["n"],
                "matchability_baseline": "unavailable",
            }
        ]
    )
    return EvaluationReport(
        alignment=metrics.as_dict(),
        alignment_buckets=alignment_buckets(alignments, overlaps),
        sgar=sgar_table(alignments),
        confusion=metrics.confusion,
        noise=noise_sweep(params, ordered, seed, sim_threshold, jobs),
        changed=changed_scene_table(params, scenarios, sim_threshold, jobs),
        registration=registration_rows(registrations, overlaps),
        registration_buckets=registration_buckets(registrations, overlaps),
        overlap=overlap,
        overlap_decisions=pd.DataFrame(decisions, columns=DECISION_COLUMNS),
        timing={"mean_ms": summary["mean_ms"], "n": summary["n"]},
    )
