"""
Multi-fragment reconstruction: register every fragment to an origin and merge.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from src.alignment import DEFAULT_OVERLAP_THRESHOLD, DEFAULT_SIM_THRESHOLD, match_nodes
from src.datagen import relative_transform
from src.encoders import ModelParams, embed_scene
from src.geometry import RigidTransform, rotation_error_deg
from src.registration import RansacConfig, register_graphs
from src.report_generation import write_json
from src.scenegraph import SceneGraph, write_point_cloud

logger = logging.getLogger(__name__)

RECONSTRUCTION_THRESHOLD = 0.05
FRAGMENT_STATUSES = ("origin", "registered", "non-overlap", "failed")


class MosaicError(RuntimeError):
    """Mosaic could not be built (too few fragments or none registered)."""


@dataclass
class MosaicConfig:
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    ransac: RansacConfig = field(default_factory=RansacConfig)
    metric_threshold: float = RECONSTRUCTION_THRESHOLD


@dataclass
class FragmentStatus:
    scene_id: str
    status: str
    transform: Optional[RigidTransform] = None
    xi: float = 1.0
    n_inliers: int = 0
    rre: Optional[float] = None
    rte: Optional[float] = None

    def as_dict(self) -> Dict:
        return {
            "scene_id": self.scene_id,
            "status": self.status,
            "transform": (
                None if self.transform is None else self.transform.matrix().tolist()
            ),
            "xi": self.xi,
            "n_inliers": self.n_inliers,
            "rre_deg": self.rre,
            "rte_m": self.rte,
        }


@dataclass
class MosaicResult:
    origin_id: str
    fragments: List[FragmentStatus]
    merged: np.ndarray
    metrics: Optional[Dict[str, float]] = None

    @property
    def registered(self) -> List[str]:
        included = ("origin", "registered")
        return [f.scene_id for f in self.fragments if f.status in included]

    def as_dict(self) -> Dict:
        return {
            "origin_id": self.origin_id,
            "fragments": [f.as_dict() for f in self.fragments],
            "n_points": int(self.merged.shape[0]),
            "metrics": self.metrics,
        }


def select_origin(fragments: Sequence[SceneGraph]) -> SceneGraph:
    """Fragment with the most nodes; ties go to the lowest scene_id."""
    return min(fragments, key=lambda g: (-len(g.nodes), g.scene_id))


def reconstruction_metrics(
    pred: np.ndarray, gt: np.ndarray, threshold: float = RECONSTRUCTION_THRESHOLD
) -> Dict[str, float]:
    """
    Accuracy, completion, precision, recall and F1 of a reconstructed cloud.

    acc is the mean distance from each predicted point to the ground truth,
    comp the mean distance from each ground-truth point to the prediction;
    precision/recall count distances strictly below `threshold`.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("reconstruction metrics need non-empty clouds")
    pred_to_gt, _ = cKDTree(gt).query(pred, k=1)
    gt_to_pred, _ = cKDTree(pred).query(gt, k=1)
    precision = float(np.mean(pred_to_gt < threshold))
    recall = float(np.mean(gt_to_pred < threshold))
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return {
        "acc": float(np.mean(pred_to_gt)),
        "comp": float(np.mean(gt_to_pred)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def ground_truth_cloud(
    fragments: Sequence[SceneGraph], origin: SceneGraph
) -> np.ndarray:
    """Union of all fragments mapped into the origin frame by ground-truth poses."""
    return np.concatenate(
        [relative_transform(g, origin).apply(g.all_points()) for g in fragments]
    )


def mosaic(
    fragments: Sequence[SceneGraph],
    params: ModelParams,
    cfg: Optional[MosaicConfig] = None,
    gt_cloud: Optional[np.ndarray] = None,
) -> MosaicResult:
    """
    Register every fragment to the origin and merge the included ones.

    Fragments failing the overlap check or registration are excluded and
    reported with their status. When every fragment carries a pose (or
    `gt_cloud` is given) the merged cloud is scored against the ground truth.

    Raises:
        MosaicError: fewer than 2 fragments, or no fragment registered
    """
    cfg = cfg or MosaicConfig()
    if len(fragments) < 2:
        raise MosaicError(
            f"mosaicking needs at least 2 fragments, got {len(fragments)}"
        )
    origin = select_origin(fragments)
    origin_embeddings = embed_scene(params, origin)
    with_poses = all(g.pose is not None for g in fragments)

    statuses = [FragmentStatus(origin.scene_id, "origin", RigidTransform.identity())]
    merged = [origin.all_points()]
    others = sorted((g for g in fragments if g is not origin), key=lambda g: g.scene_id)
    for fragment in others:
        matching = match_nodes(
            embed_scene(params, fragment), origin_embeddings, cfg.sim_threshold
        )
        outcome = register_graphs(
            fragment,
            origin,
            matching,
            cfg.ransac,
            cfg.sim_threshold,
            cfg.overlap_threshold,
        )
        if outcome.result is None:
            logger.warning(
                f"mosaic: excluding {fragment.scene_id} ({outcome.decision})"
            )
            statuses.append(
                FragmentStatus(fragment.scene_id, outcome.decision, xi=outcome.xi)
            )
            continue
        transform = outcome.result.transform
        status = FragmentStatus(
            fragment.scene_id,
            "registered",
            transform,
            outcome.xi,
            outcome.result.n_inliers,
        )
        if with_poses:
            gt = relative_transform(fragment, origin)
            status.rre = rotation_error_deg(transform.rotation, gt.rotation)
            status.rte = float(np.linalg.norm(transform.translation - gt.translation))
        statuses.append(status)
        merged.append(transform.apply(fragment.all_points()))

    if len(merged) == 1:
        raise MosaicError(
            f"no fragment could be registered to origin {origin.scene_id}"
        )
    merged_cloud = np.concatenate(merged)
    if gt_cloud is None and with_poses:
        gt_cloud = ground_truth_cloud(fragments, origin)
    metrics = None
    if gt_cloud is not None:
        metrics = reconstruction_metrics(merged_cloud, gt_cloud, cfg.metric_threshold)
        logger.info(
            f"mosaic around {origin.scene_id}: {len(merged)}/{len(fragments)} "
            f"fragments, F1 {metrics['f1']:.3f}"
        )
    return MosaicResult(origin.scene_id, statuses, merged_cloud, metrics)


def write_mosaic(result: MosaicResult, out_dir: Path) -> Path:
    """Write mosaic.json and the merged cloud (merged.sgpc) into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_point_cloud(result.merged, out_dir / "merged.sgpc")
    return write_json(result.as_dict(), out_dir / "mosaic.json")
