"""
Point-cloud registration from matched scene-graph nodes.

Correspondences are extracted per matched node pair from rotation-invariant
local descriptors, pooled over all matches and fed to RANSAC with a Kabsch
model fit.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from src.alignment import (
    DEFAULT_OVERLAP_THRESHOLD,
    DEFAULT_SIM_THRESHOLD,
    AlignmentResult,
    PairAlignment,
    match_nodes,
    overlap_score,
)
from src.encoders import ModelParams, embed_scene
from src.geometry import (
    DegenerateConfigurationError,
    RigidTransform,
    kabsch,
    rotation_error_deg,
)
from src.scenegraph import InstancePointCloud, SceneGraph

__all__ = [
    "RigidTransform",
    "kabsch",
    "RansacConfig",
    "CorrespondenceSet",
    "RegistrationError",
    "RegistrationResult",
    "PairRegistration",
    "local_descriptors",
    "estimate_normals",
    "node_correspondences",
    "register",
    "register_alignment",
    "register_graphs",
    "GraphRegistration",
    "registration_metrics",
    "inlier_ratio",
    "fmr",
    "classification_metrics",
    "overlap_benchmark",
]

logger = logging.getLogger(__name__)

NORMAL_NEIGHBORS = 8
DESCRIPTOR_NEIGHBORS = 16
BINS_PER_FEATURE = 11
DESCRIPTOR_SIZE = 3 * BINS_PER_FEATURE
MUTUAL_PERCENTILE = 60.0
MAX_PAIRS_PER_NODE = 128
LOW_QUALITY_FRACTION = 0.25
MIN_DESCRIPTOR_POINTS = 10
RECALL_RMSE = 0.2
FMR_INLIER_DISTANCE = 0.1
FMR_RATIO_THRESHOLD = 0.05


class RegistrationError(RuntimeError):
    """Not enough correspondences to estimate a transform."""


@dataclass
class RansacConfig:
    max_iterations: int = 5000
    inlier_threshold: float = 0.05
    min_sample: int = 3
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError(
                f"inlier_threshold must be positive, got {self.inlier_threshold}"
            )
        if self.min_sample != 3:
            raise ValueError(f"min_sample must be 3, got {self.min_sample}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class CorrespondenceSet:
    """Point pairs from one matched node pair, sorted by descriptor distance."""

    source_points: np.ndarray
    target_points: np.ndarray
    distances: np.ndarray
    source_node: int = -1
    target_node: int = -1
    low_quality: bool = False

    def __len__(self) -> int:
        return int(self.source_points.shape[0])


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inliers: np.ndarray
    n_correspondences: int
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


# --- descriptors ---------------------------------------------------------------


def estimate_normals(points: np.ndarray, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """
    Unit normals from the smallest-eigenvalue eigenvector of each point's
    k-neighbourhood covariance, flipped to point away from the cloud centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    k = min(k + 1, points.shape[0])
    _, neighbors = cKDTree(points).query(points, k=k)
    local = points[neighbors]
    centered = local - local.mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", centered, centered)
    _, vectors = np.linalg.eigh(covariance)
    normals = vectors[:, :, 0]
    outward = np.einsum("ni,ni->n", normals, points - points.mean(axis=0))
    normals[outward < 0] *= -1.0
    return normals


def _soft_bins(values: np.ndarray, low: float, high: float, circular: bool):
    position = (values - low) / (high - low) * BINS_PER_FEATURE - 0.5
    lower = np.floor(position)
    upper_weight = position - lower
    lower = lower.astype(np.int64)
    upper = lower + 1
    if circular:
        lower %= BINS_PER_FEATURE
        upper %= BINS_PER_FEATURE
    else:
        lower = np.clip(lower, 0, BINS_PER_FEATURE - 1)
        upper = np.clip(upper, 0, BINS_PER_FEATURE - 1)
    return lower, upper, upper_weight


def _pair_features(points, normals, neighbors):
    """Darboux-frame angles (alpha, phi, theta) and distances per neighbour pair."""
    p = points[:, None, :]
    n_p = np.broadcast_to(normals[:, None, :], neighbors.shape + (3,))
    n_q = normals[neighbors]
    delta = points[neighbors] - p
    dist = np.linalg.norm(delta, axis=2)
    direction = delta / np.maximum(dist, 1e-12)[..., None]
    v = np.cross(n_p, direction)
    v_norm = np.linalg.norm(v, axis=2, keepdims=True)
    v = np.divide(v, v_norm, out=np.zeros_like(v), where=v_norm > 1e-12)
    w = np.cross(n_p, v)
    alpha = np.einsum("nki,nki->nk", v, n_q)
    phi = np.einsum("nki,nki->nk", n_p, direction)
    theta = np.arctan2(
        np.einsum("nki,nki->nk", w, n_q), np.einsum("nki,nki->nk", n_p, n_q)
    )
    return alpha, phi, theta, dist


def _descriptors_unique(points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    normals = estimate_normals(points)
    k = min(DESCRIPTOR_NEIGHBORS, n - 1)
    _, neighbors = cKDTree(points).query(points, k=k + 1)
    neighbors = neighbors[:, 1:]
    alpha, phi, theta, dist = _pair_features(points, normals, neighbors)

    spfh = np.zeros((n, DESCRIPTOR_SIZE))
    rows = np.repeat(np.arange(n), k)
    features = (
        (alpha, -1.0, 1.0, False),
        (phi, -1.0, 1.0, False),
        (theta, -np.pi, np.pi, True),
    )
    for slot, (values, low, high, circular) in enumerate(features):
        lower, upper, weight = _soft_bins(values.reshape(-1), low, high, circular)
        offset = slot * BINS_PER_FEATURE
        np.add.at(spfh, (rows, offset + lower), (1.0 - weight) / k)
        np.add.at(spfh, (rows, offset + upper), weight / k)

    weights = 1.0 / np.maximum(dist, 1e-6)
    fpfh = spfh + np.einsum("nk,nkd->nd", weights, spfh[neighbors]) / k
    return fpfh / fpfh.sum(axis=1, keepdims=True)


def _unique_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    return unique, np.asarray(inverse).reshape(-1)


def local_descriptors(cloud: InstancePointCloud) -> np.ndarray:
    """
    33-bin rotation-invariant histogram descriptor per point (L1-normalized).

    Duplicate points share one descriptor.

    Raises:
        RegistrationError: fewer than 10 distinct points
    """
    unique, inverse = _unique_points(cloud.points)
    if unique.shape[0] < MIN_DESCRIPTOR_POINTS:
        raise RegistrationError(
            f"descriptors need at least {MIN_DESCRIPTOR_POINTS} distinct points, "
            f"got {unique.shape[0]}"
        )
    return _descriptors_unique(unique)[inverse]


def node_correspondences(
    source: InstancePointCloud,
    target: InstancePointCloud,
    source_node: int = -1,
    target_node: int = -1,
) -> CorrespondenceSet:
    """
    Mutual nearest neighbours in descriptor space between two node clouds.

    Keeps pairs at or below the 60th percentile of mutual distances, at most
    128 per node pair (closest first).
    """
    src_points, _ = _unique_points(source.points)
    dst_points, _ = _unique_points(target.points)
    if min(src_points.shape[0], dst_points.shape[0]) < MIN_DESCRIPTOR_POINTS:
        raise RegistrationError(
            f"node pair ({source_node}, {target_node}) has fewer than "
            f"{MIN_DESCRIPTOR_POINTS} distinct points"
        )
    src_desc = _descriptors_unique(src_points)
    dst_desc = _descriptors_unique(dst_points)
    forward_dist, forward = cKDTree(dst_desc).query(src_desc, k=1)
    _, backward = cKDTree(src_desc).query(dst_desc, k=1)
    mutual = np.nonzero(backward[forward] == np.arange(src_points.shape[0]))[0]
    if mutual.size == 0:
        logger.warning(
            f"node pair ({source_node}, {target_node}): no mutual correspondences"
        )
        empty = np.zeros((0, 3))
        return CorrespondenceSet(
            empty, empty, np.zeros(0), source_node, target_node, low_quality=True
        )

    distances = forward_dist[mutual]
    keep = distances <= np.percentile(distances, MUTUAL_PERCENTILE)
    mutual, distances = mutual[keep], distances[keep]
    order = np.lexsort((mutual, distances))[:MAX_PAIRS_PER_NODE]
    mutual, distances = mutual[order], distances[order]
    smaller = min(src_points.shape[0], dst_points.shape[0])
    low_quality = mutual.size < LOW_QUALITY_FRACTION * smaller
    return CorrespondenceSet(
        source_points=src_points[mutual],
        target_points=dst_points[forward[mutual]],
        distances=distances,
        source_node=source_node,
        target_node=target_node,
        low_quality=bool(low_quality),
    )


# --- robust estimation ---------------------------------------------------------


def _required_iterations(
    inlier_fraction: float, confidence: float, sample: int
) -> float:
    good = inlier_fraction**sample
    if good >= 1.0:
        return 0.0
    if good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - good)


def register(
    correspondences: Sequence[CorrespondenceSet], cfg: RansacConfig
) -> RegistrationResult:
    """
    RANSAC over pooled correspondences with a final Kabsch refit.

    The best hypothesis maximizes the inlier count (residual < threshold);
    ties keep the earlier iteration. Stops early once the confidence bound
    for the current inlier fraction is met.

    Raises:
        RegistrationError: fewer than 3 pooled correspondences, or every
            sample was degenerate
    """
    pooled = [c for c in correspondences if len(c) > 0]
    source = np.concatenate([c.source_points for c in pooled] or [np.zeros((0, 3))])
    target = np.concatenate([c.target_points for c in pooled] or [np.zeros((0, 3))])
    m = source.shape[0]
    if m < cfg.min_sample:
        raise RegistrationError(
            f"registration needs at least {cfg.min_sample} correspondences, got {m}"
        )

    rng = np.random.default_rng(cfg.seed)
    best_model: Optional[RigidTransform] = None
    best_inliers = np.zeros(m, dtype=bool)
    best_count = -1
    needed = math.inf
    iteration = 0
    for iteration in range(1, cfg.max_iterations + 1):
        sample = rng.choice(m, size=cfg.min_sample, replace=False)
        try:
            model = kabsch(source[sample], target[sample])
        except DegenerateConfigurationError:
            continue
        residual = np.linalg.norm(model.apply(source) - target, axis=1)
        inliers = residual < cfg.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_model, best_inliers, best_count = model, inliers, count
            needed = _required_iterations(count / m, cfg.confidence, cfg.min_sample)
        if iteration >= needed:
            break
    if best_model is None:
        raise RegistrationError("every RANSAC sample was degenerate")

    transform = best_model
    if best_count >= cfg.min_sample:
        try:
            transform = kabsch(source[best_inliers], target[best_inliers])
        except DegenerateConfigurationError:
            pass
        residual = np.linalg.norm(transform.apply(source) - target, axis=1)
        refit_inliers = residual < cfg.inlier_threshold
        if refit_inliers.sum() >= best_count:
            best_inliers = refit_inliers
        else:
            transform = best_model
    logger.debug(
        f"ransac: {int(best_inliers.sum())}/{m} inliers after {iteration} iterations"
    )
    return RegistrationResult(
        transform=transform,
        inliers=best_inliers,
        n_correspondences=m,
        iterations=iteration,
    )


# --- metrics -----------------------------------------------------------------------


def _mean_sq_nn(points: np.ndarray, reference: np.ndarray) -> float:
    distances, _ = cKDTree(reference).query(points, k=1)
    return float(np.mean(distances**2))


def registration_metrics(
    est: RigidTransform,
    gt: RigidTransform,
    source_points: np.ndarray,
    target_points: np.ndarray,
    anchor_points: np.ndarray,
) -> Dict[str, float]:
    """
    Rotation/translation errors, correspondence RMSE and modified Chamfer distance.

    Args:
        est: Estimated source-to-target transform
        gt: Ground-truth source-to-target transform
        source_points: Raw source cloud (source frame)
        target_points: Raw target cloud (target frame)
        anchor_points: Source points of anchored nodes; RMSE compares est and gt on them

    Returns:
        Dict with rre (degrees), rte (m), rmse (m), chamfer (m^2), recalled (bool)
    """
    anchor_points = np.asarray(anchor_points, dtype=np.float64).reshape(-1, 3)
    if anchor_points.shape[0]:
        residual = est.apply(anchor_points) - gt.apply(anchor_points)
        rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    else:
        rmse = float("nan")
    moved = est.apply(source_points)
    chamfer = _mean_sq_nn(moved, target_points) + _mean_sq_nn(target_points, moved)
    return {
        "rre": rotation_error_deg(est.rotation, gt.rotation),
        "rte": float(np.linalg.norm(est.translation - gt.translation)),
        "rmse": rmse,
        "chamfer": chamfer,
        "recalled": bool(rmse < RECALL_RMSE),
    }


def inlier_ratio(
    correspondences: Sequence[CorrespondenceSet],
    gt: RigidTransform,
    distance: float = FMR_INLIER_DISTANCE,
) -> float:
    """Fraction of pooled correspondences within `distance` under the ground truth."""
    pooled = [c for c in correspondences if len(c) > 0]
    if not pooled:
        return 0.0
    source = np.concatenate([c.source_points for c in pooled])
    target = np.concatenate([c.target_points for c in pooled])
    return float(np.mean(np.linalg.norm(gt.apply(source) - target, axis=1) < distance))


def fmr(inlier_ratios: Sequence[float], tau: float = FMR_RATIO_THRESHOLD) -> float:
    """Feature match recall: share of pairs whose inlier ratio exceeds tau."""
    ratios = np.asarray(inlier_ratios, dtype=np.float64)
    return float(np.mean(ratios > tau)) if ratios.size else 0.0


# --- pair pipeline -------------------------------------------------------------------


@dataclass
class PairRegistration:
    """Outcome of registering one scene pair.

    `decision` is one of "overlap", "non-overlap" or "failed".
    """

    pair_id: str
    decision: str
    xi: float
    transform: Optional[RigidTransform] = None
    metrics: Dict[str, float] = field(default_factory=dict)
    inlier_ratio: float = 0.0
    n_correspondences: int = 0
    correspondences: List[CorrespondenceSet] = field(default_factory=list, repr=False)

    def as_dict(self) -> Dict:
        return {
            "pair_id": self.pair_id,
            "decision": self.decision,
            "xi": self.xi,
            "transform": (
                None if self.transform is None else self.transform.matrix().tolist()
            ),
            "rre_deg": self.metrics.get("rre"),
            "rte_m": self.metrics.get("rte"),
            "chamfer": self.metrics.get("chamfer"),
            "rmse": self.metrics.get("rmse"),
            "recalled": bool(self.metrics.get("recalled", False)),
            "inlier_ratio": self.inlier_ratio,
            "n_correspondences": self.n_correspondences,
        }


def matched_correspondences(
    source: SceneGraph, target: SceneGraph, matches: Sequence[Tuple[int, int, float]]
) -> List[CorrespondenceSet]:
    sets = []
    for source_id, target_id, _ in matches:
        try:
            sets.append(
                node_correspondences(
                    source.node(source_id).cloud,
                    target.node(target_id).cloud,
                    source_id,
                    target_id,
                )
            )
        except RegistrationError as exc:
            logger.warning(f"skipping node pair ({source_id}, {target_id}): {exc}")
    return sets


@dataclass
class GraphRegistration:
    decision: str
    xi: float
    result: Optional[RegistrationResult] = None
    correspondences: List[CorrespondenceSet] = field(default_factory=list, repr=False)

    @property
    def n_correspondences(self) -> int:
        return sum(len(c) for c in self.correspondences)


def register_graphs(
    source: SceneGraph,
    target: SceneGraph,
    matching: AlignmentResult,
    cfg: RansacConfig,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> GraphRegistration:
    """
    Decide overlap from a node matching, then register on confident top-1 matches.

    A non-overlapping verdict skips registration; too few correspondences
    yield a 'failed' decision.
    """
    xi, overlapping = overlap_score(matching, sim_threshold, overlap_threshold)
    if not overlapping:
        return GraphRegistration("non-overlap", xi)
    matches = [m for m in matching.matched_pairs(1) if m[2] >= sim_threshold]
    sets = matched_correspondences(source, target, matches)
    try:
        result = register(sets, cfg)
    except RegistrationError as exc:
        logger.warning(
            f"{source.scene_id} -> {target.scene_id}: registration failed ({exc})"
        )
        return GraphRegistration("failed", xi, correspondences=sets)
    return GraphRegistration("overlap", xi, result, sets)


def register_alignment(
    alignment: PairAlignment,
    cfg: RansacConfig,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> PairRegistration:
    """Register an evaluated pair and score it against the ground truth."""
    outcome = register_graphs(
        alignment.source,
        alignment.target,
        alignment.result,
        cfg,
        sim_threshold,
        overlap_threshold,
    )
    if outcome.result is None:
        return PairRegistration(
            alignment.pair_id,
            outcome.decision,
            outcome.xi,
            n_correspondences=outcome.n_correspondences,
            correspondences=outcome.correspondences,
        )

    result = outcome.result
    source = alignment.source
    anchored = [
        source.node(s).cloud.points for s, _ in alignment.anchors if source.has_node(s)
    ]
    anchor_points = np.concatenate(anchored) if anchored else np.zeros((0, 3))
    metrics = registration_metrics(
        result.transform,
        alignment.gt_transform,
        alignment.source.all_points(),
        alignment.target.all_points(),
        anchor_points,
    )
    logger.info(
        f"{alignment.pair_id}: {result.n_inliers}/{result.n_correspondences} inliers, "
        f"RRE {metrics['rre']:.2f} deg, RTE {metrics['rte']:.3f} m"
    )
    return PairRegistration(
        pair_id=alignment.pair_id,
        decision="overlap",
        xi=outcome.xi,
        transform=result.transform,
        metrics=metrics,
        inlier_ratio=inlier_ratio(outcome.correspondences, alignment.gt_transform),
        n_correspondences=outcome.n_correspondences,
        correspondences=outcome.correspondences,
    )


# --- overlap decision benchmark ------------------------------------------------------


def classification_metrics(
    labels: Sequence[bool], predictions: Sequence[bool]
) -> Dict[str, float]:
    """Precision, recall and F1 of the overlapping class; 0 where undefined."""
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    true_positive = float(np.sum(labels & predictions))
    predicted = float(np.sum(predictions))
    actual = float(np.sum(labels))
    precision = true_positive / predicted if predicted else 0.0
    recall = true_positive / actual if actual else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return {"precision": precision, "recall": recall, "f1": f1}


def overlap_benchmark(
    params: ModelParams,
    pairs: Sequence[Tuple[SceneGraph, SceneGraph, bool]],
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> Tuple[Dict[str, float], List[Dict]]:
    """
    Classify (source, target, overlapping) pairs with the alignment score xi.

    Each decision (both embeddings, matching, scoring) is timed.

    Returns:
        Aggregate {precision, recall, f1, mean_ms, n} and per-pair decision rows
    """
    labels, predictions, rows = [], [], []
    elapsed_ms = []
    for source, target, label in pairs:
        start = time.perf_counter()
        result = match_nodes(
            embed_scene(params, source), embed_scene(params, target), sim_threshold
        )
        xi, overlapping = overlap_score(result, sim_threshold, overlap_threshold)
        elapsed_ms.append((time.perf_counter() - start) * 1000.0)
        labels.append(bool(label))
        predictions.append(overlapping)
        rows.append(
            {
                "source": source.scene_id,
                "target": target.scene_id,
                "label": bool(label),
                "xi": xi,
                "predicted": overlapping,
            }
        )
    summary = classification_metrics(labels, predictions)
    summary["mean_ms"] = float(np.mean(elapsed_ms)) if elapsed_ms else 0.0
    summary["n"] = len(rows)
    return summary, rows
