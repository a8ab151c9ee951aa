"""Node matching on joint embeddings, alignment metrics and the overlap score."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.datagen import ScenePair
from src.encoders import EmbeddingSet, ModelParams, embed_scene
from src.geometry import RigidTransform, fit_rigid
from src.scenegraph import AnchorSet, SceneGraph, graph_barycenters

logger = logging.getLogger(__name__)

SGAR_STRATEGIES = ("top2", "top50pct", "all")
SGAR_RMSE_THRESHOLD = 0.2
DEFAULT_SIM_THRESHOLD = 0.5
DEFAULT_OVERLAP_THRESHOLD = 0.2
HITS_K = (1, 2, 3, 4, 5)


class AlignmentError(ValueError):
    """Anchors or inputs inconsistent with a matching result."""


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity in float64, clipped to [-1, 1]; zero rows give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a = np.linalg.norm(a, axis=1, keepdims=True)
    norm_b = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.divide(a, norm_a, out=np.zeros_like(a), where=norm_a > 0)
    b = np.divide(b, norm_b, out=np.zeros_like(b), where=norm_b > 0)
    return np.clip(a @ b.T, -1.0, 1.0)


@dataclass
class AlignmentResult:
    """
    Complete per-source-node rankings of target nodes.

    `order[i]` lists target column indices by descending similarity, ties
    broken by lower target id.
    """

    source_ids: Tuple[int, ...]
    target_ids: Tuple[int, ...]
    similarity: np.ndarray
    order: np.ndarray
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    _source_row: Dict[int, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._source_row = {node_id: row for row, node_id in enumerate(self.source_ids)}

    def ranking(self, source_id: int) -> List[Tuple[int, float]]:
        row = self._row(source_id)
        return [
            (self.target_ids[col], float(self.similarity[row, col]))
            for col in self.order[row]
        ]

    def rank_of(self, source_id: int, target_id: int) -> int:
        """1-based rank of `target_id` in the ranking of `source_id`."""
        row = self._row(source_id)
        try:
            col = self.target_ids.index(target_id)
        except ValueError:
            raise AlignmentError(
                f"target node {target_id} is not among the candidates"
            ) from None
        return int(np.nonzero(self.order[row] == col)[0][0]) + 1

    def top1(self, source_id: int) -> Tuple[int, float]:
        row = self._row(source_id)
        col = self.order[row, 0]
        return self.target_ids[col], float(self.similarity[row, col])

    def matched_pairs(self, k: int = 1) -> List[Tuple[int, int, float]]:
        """(source id, target id, similarity) for each source node's top-k targets."""
        pairs = []
        for row, source_id in enumerate(self.source_ids):
            for col in self.order[row, :k]:
                similarity = float(self.similarity[row, col])
                pairs.append((source_id, self.target_ids[col], similarity))
        return pairs

    def _row(self, source_id: int) -> int:
        try:
            return self._source_row[source_id]
        except KeyError:
            raise AlignmentError(
                f"source node {source_id} is not in the matching result"
            ) from None


def rank_targets(similarity: np.ndarray, target_ids: Sequence[int]) -> np.ndarray:
    """Per-row argsort by (similarity desc, target id asc)."""
    ids = np.asarray(target_ids, dtype=np.int64)
    order = [np.lexsort((ids, -row)) for row in similarity]
    return np.array(order, dtype=np.int64).reshape(similarity.shape)


def match_nodes(
    src: EmbeddingSet, dst: EmbeddingSet, sim_threshold: float = DEFAULT_SIM_THRESHOLD
) -> AlignmentResult:
    """Rank every target node for every source node by joint-embedding cosine."""
    similarity = cosine_matrix(src.joint_array(), dst.joint_array())
    return AlignmentResult(
        source_ids=tuple(src.node_ids),
        target_ids=tuple(dst.node_ids),
        similarity=similarity,
        order=rank_targets(similarity, dst.node_ids),
        sim_threshold=sim_threshold,
    )


def anchor_ranks(result: AlignmentResult, anchors: AnchorSet) -> np.ndarray:
    return np.array([result.rank_of(s, t) for s, t in anchors], dtype=np.int64)


def mrr_from_ranks(ranks: np.ndarray) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / ranks)) if ranks.size else 0.0


def hits_from_ranks(ranks: np.ndarray, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def mrr(result: AlignmentResult, anchors: AnchorSet) -> float:
    """Mean reciprocal rank of the true matches."""
    return mrr_from_ranks(anchor_ranks(result, anchors))


def hits_at_k(result: AlignmentResult, anchors: AnchorSet, k: int) -> float:
    """Fraction of anchors whose true match ranks within the top k."""
    return hits_from_ranks(anchor_ranks(result, anchors), k)


@dataclass
class PairAlignment:
    """Matching of one scene pair with everything the metrics need."""

    pair_id: str
    source: SceneGraph
    target: SceneGraph
    anchors: AnchorSet
    gt_transform: RigidTransform
    result: AlignmentResult
    source_embeddings: Optional[EmbeddingSet] = None
    target_embeddings: Optional[EmbeddingSet] = None


def align_pair(
    params: ModelParams,
    pair: ScenePair,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    source: Optional[SceneGraph] = None,
    target: Optional[SceneGraph] = None,
) -> PairAlignment:
    """Embed both graphs of a pair (optionally substituted, e.g. noised) and match."""
    source = pair.source if source is None else source
    target = pair.target if target is None else target
    src_emb = embed_scene(params, source)
    dst_emb = embed_scene(params, target)
    kept = AnchorSet(
        tuple(
            (a, b)
            for a, b in pair.anchors
            if source.has_node(a) and target.has_node(b)
        )
    )
    return PairAlignment(
        pair_id=pair.pair_id,
        source=source,
        target=target,
        anchors=kept,
        gt_transform=pair.gt_transform,
        result=match_nodes(src_emb, dst_emb, sim_threshold),
        source_embeddings=src_emb,
        target_embeddings=dst_emb,
    )


def _select_matches(
    result: AlignmentResult, strategy: str
) -> List[Tuple[int, int, float]]:
    matches = sorted(result.matched_pairs(1), key=lambda m: (-m[2], m[0]))
    if strategy == "top2":
        return matches[:2]
    if strategy == "top50pct":
        return matches[: math.ceil(0.5 * len(matches))]
    if strategy == "all":
        return matches
    raise ValueError(f"unknown SGAR strategy {strategy!r}; use {SGAR_STRATEGIES}")


def pair_aligned(alignment: PairAlignment, strategy: str) -> bool:
    """
    Whether the rigid fit on the selected top-1 matches' barycenters lands
    within 0.2 m RMSE of the ground truth on the anchored source barycenters.
    """
    matches = _select_matches(alignment.result, strategy)
    if len(matches) < 2 or len(alignment.anchors) == 0:
        return False
    src_centers = graph_barycenters(alignment.source)
    dst_centers = graph_barycenters(alignment.target)
    source, target = alignment.source, alignment.target
    src_points = np.array([src_centers[source.index_of(s)] for s, _, _ in matches])
    dst_points = np.array([dst_centers[target.index_of(t)] for _, t, _ in matches])
    estimate = fit_rigid(src_points, dst_points)
    if estimate is None:
        return False
    anchored = np.array([src_centers[source.index_of(s)] for s, _ in alignment.anchors])
    residual = estimate.apply(anchored) - alignment.gt_transform.apply(anchored)
    rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return rmse < SGAR_RMSE_THRESHOLD


def sgar(alignments: Sequence[PairAlignment], strategy: str) -> float:
    """Fraction of scene pairs aligned correctly under `strategy`."""
    if strategy not in SGAR_STRATEGIES:
        raise ValueError(f"unknown SGAR strategy {strategy!r}; use {SGAR_STRATEGIES}")
    if not alignments:
        return 0.0
    return float(np.mean([pair_aligned(a, strategy) for a in alignments]))


def self_aligned_count(
    src: EmbeddingSet,
    dst: EmbeddingSet,
    anchors: AnchorSet,
    include_same_graph: bool = True,
) -> int:
    """
    Anchored source nodes whose top candidate lies in their own graph.

    Candidates are all target nodes plus (optionally) the other source nodes;
    ties go to the lower node id, then to the cross-graph candidate.
    """
    src_vectors = src.joint_array()
    cross = cosine_matrix(src_vectors, dst.joint_array())
    same = cosine_matrix(src_vectors, src_vectors)
    dst_ids = np.asarray(dst.node_ids, dtype=np.int64)
    src_ids = np.asarray(src.node_ids, dtype=np.int64)
    count = 0
    for source_id, _ in anchors:
        row = src.row(source_id)
        sims = list(cross[row])
        ids = list(dst_ids)
        sides = [1] * len(ids)
        if include_same_graph:
            keep = src_ids != source_id
            sims += list(same[row][keep])
            ids += list(src_ids[keep])
            sides += [2] * int(keep.sum())
        best = np.lexsort((np.array(sides), np.array(ids), -np.array(sims)))[0]
        count += int(sides[best] == 2)
    return count


def igar(alignments: Sequence[PairAlignment], include_same_graph: bool = True) -> float:
    """Mean over pairs with anchors of (self-aligned anchored nodes) / |anchors|."""
    ratios = []
    for alignment in alignments:
        if len(alignment.anchors) == 0:
            continue
        if alignment.source_embeddings is None or alignment.target_embeddings is None:
            raise AlignmentError(
                f"{alignment.pair_id}: IGAR needs the pair's embeddings"
            )
        count = self_aligned_count(
            alignment.source_embeddings,
            alignment.target_embeddings,
            alignment.anchors,
            include_same_graph,
        )
        ratios.append(count / len(alignment.anchors))
    return float(np.mean(ratios)) if ratios else 0.0


def confusion_matrix(alignments: Sequence[PairAlignment]) -> pd.DataFrame:
    """
    Category confusion of top-1 matches.

    Rows are the true match's category, columns the top-1 match's category.
    """
    if not alignments:
        return pd.DataFrame(dtype=np.int64)
    categories = list(alignments[0].target.vocabulary.categories)
    counts = np.zeros((len(categories), len(categories)), dtype=np.int64)
    for alignment in alignments:
        for source_id, target_id in alignment.anchors:
            matched_id, _ = alignment.result.top1(source_id)
            true_category = alignment.target.node(target_id).category
            matched_category = alignment.target.node(matched_id).category
            counts[true_category, matched_category] += 1
    frame = pd.DataFrame(counts, index=categories, columns=categories)
    frame.index.name = "true_category"
    return frame


def overlap_score(
    result: AlignmentResult,
    sim_threshold: Optional[float] = None,
    threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> Tuple[float, bool]:
    """
    Scene-level alignment score xi and the overlap decision.

    xi = |source nodes whose top-1 similarity >= sim_threshold| / min(|src|, |dst|).
    """
    sim_threshold = result.sim_threshold if sim_threshold is None else sim_threshold
    denominator = min(len(result.source_ids), len(result.target_ids))
    if denominator == 0:
        return 0.0, False
    rows = np.arange(len(result.source_ids))
    top_similarity = result.similarity[rows, result.order[:, 0]]
    xi = float(np.sum(top_similarity >= sim_threshold)) / denominator
    return xi, xi >= threshold


@dataclass
class AlignmentMetrics:
    mrr: float
    hits: Dict[int, float]
    sgar: Dict[str, float]
    igar: float
    confusion: pd.DataFrame
    n_pairs: int = 0
    n_anchors: int = 0

    def as_dict(self) -> Dict[str, float]:
        """Flat scalar view (the confusion matrix is reported separately)."""
        flat = {
            "mrr": self.mrr,
            "igar": self.igar,
            "n_pairs": self.n_pairs,
            "n_anchors": self.n_anchors,
        }
        flat.update({f"hits@{k}": value for k, value in self.hits.items()})
        flat.update({f"sgar_{name}": value for name, value in self.sgar.items()})
        return flat


def evaluate_alignments(alignments: Sequence[PairAlignment]) -> AlignmentMetrics:
    """Micro-averaged MRR/Hits over all anchors; SGAR and IGAR over pairs."""
    ranks = (
        np.concatenate([anchor_ranks(a.result, a.anchors) for a in alignments])
        if alignments
        else np.zeros(0, dtype=np.int64)
    )
    return AlignmentMetrics(
        mrr=mrr_from_ranks(ranks),
        hits={k: hits_from_ranks(ranks, k) for k in HITS_K},
        sgar={strategy: sgar(alignments, strategy) for strategy in SGAR_STRATEGIES},
        igar=igar(alignments),
        confusion=confusion_matrix(alignments),
        n_pairs=len(alignments),
        n_anchors=int(ranks.size),
    )


def alignment_report(
    alignment: PairAlignment,
    k: int = 1,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> Dict:
    """JSON-ready record: top-k matches per source node and per-pair metrics."""
    ranks = anchor_ranks(alignment.result, alignment.anchors)
    xi, overlapping = overlap_score(alignment.result, threshold=overlap_threshold)
    return {
        "pair_id": alignment.pair_id,
        "matches": [
            {"src": int(s), "dst": int(t), "sim": round(sim, 6)}
            for s, t, sim in alignment.result.matched_pairs(k)
        ],
        "metrics": {
            "mrr": mrr_from_ranks(ranks),
            **{f"hits@{n}": hits_from_ranks(ranks, n) for n in HITS_K},
            "xi": xi,
            "overlapping": overlapping,
            "n_anchors": int(ranks.size),
        },
    }
