"""Synthetic scene generation, sub-scene pairs, noise injection and resampling."""
import json
import logging
import math
import zlib
import numpy as np
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.geometry import RigidTransform
from src.scenegraph import (
    AnchorSet,
    InstancePointCloud,
    ObjectNode,
    Relationship,
    SceneGraph,
    Vocabulary,
    load_scene_graph,
    restrict,
    save_scene_graph,
)

logger = logging.getLogger(__name__)

# name, shape, placement, (w range, d range, h range) in meters
CATEGORY_LIBRARY: Tuple[Tuple[str, str, str, Tuple[Tuple[float, float], ...]], ...] = (
    ("wall", "box", "wall", ((1.6, 3.2), (0.1, 0.1), (2.4, 2.7))),
    ("table", "box", "floor", ((0.8, 1.6), (0.6, 0.9), (0.70, 0.78))),
    ("chair", "lshape", "floor", ((0.45, 0.6), (0.45, 0.6), (0.8, 1.0))),
    ("sofa", "lshape", "floor", ((1.6, 2.2), (0.8, 1.0), (0.75, 0.9))),
    ("cabinet", "box", "floor", ((0.6, 1.2), (0.4, 0.6), (0.8, 2.0))),
    ("lamp", "cylinder", "support", ((0.16, 0.3), (0.16, 0.3), (0.3, 0.6))),
    ("box", "box", "support", ((0.2, 0.4), (0.2, 0.4), (0.15, 0.3))),
    ("picture", "box", "mounted", ((0.4, 1.0), (0.03, 0.04), (0.3, 0.8))),
    ("plant", "cylinder", "floor", ((0.3, 0.6), (0.3, 0.6), (0.5, 1.2))),
    ("bed", "box", "floor", ((1.4, 2.0), (1.9, 2.1), (0.4, 0.6))),
    ("tv", "box", "mounted", ((0.8, 1.4), (0.06, 0.08), (0.5, 0.8))),
    ("trash can", "cylinder", "floor", ((0.24, 0.4), (0.24, 0.4), (0.3, 0.5))),
    ("desk", "lshape", "floor", ((1.2, 1.8), (1.0, 1.4), (0.72, 0.76))),
    ("pillow", "box", "support", ((0.4, 0.6), (0.3, 0.4), (0.1, 0.15))),
    ("stool", "cylinder", "floor", ((0.3, 0.4), (0.3, 0.4), (0.4, 0.7))),
    ("shelf", "box", "mounted", ((0.6, 1.2), (0.25, 0.3), (0.04, 0.06))),
)

STANDING_ON = "standing on"
ATTACHED_TO = "attached to"
LEFT = "left"
RIGHT = "right"
SAME_CATEGORY = "same category"
CORE_PREDICATES = (STANDING_ON, ATTACHED_TO, LEFT, RIGHT, SAME_CATEGORY)
EXTRA_PREDICATES = (
    "close by",
    "built in",
    "hanging on",
    "lying on",
    "part of",
    "connected to",
    "same symmetry as",
)
GEOMETRIC_PREDICATES = frozenset(
    {STANDING_ON, ATTACHED_TO, LEFT, RIGHT, "close by", "hanging on", "lying on"}
)
ATTRIBUTE_NAMES = (
    "wooden",
    "metal",
    "white",
    "black",
    "tall",
    "flat",
    "empty",
    "closed",
    "soft",
    "glossy",
    "rectangular",
    "round",
    "padded",
    "plastic",
    "striped",
    "open",
)

ADJACENCY_GAP = 0.6
CONTACT_GAP = 0.02
SUBSCENE_ID_BASE = 10_000_000


class GenerationError(ValueError):
    """Invalid generator configuration or inconsistent generated inputs."""


@dataclass
class GenConfig:
    """Synthetic benchmark parameters (lengths in meters)."""

    seed: int = 0
    num_scenes: int = 40
    objects_per_scene: Tuple[int, int] = (8, 14)
    category_count: int = 12
    predicate_count: int = 6
    attribute_count: int = 8
    room_extent: float = 6.0
    points_per_object_raw: Tuple[int, int] = (400, 2000)
    target_points: int = 512
    overlap_range: Tuple[float, float] = (0.10, 0.90)
    voxel_size: float = 0.05
    subscenes_per_scene: int = 6
    point_noise: float = 0.005
    pose_mode: str = "yaw"
    view_extent: Tuple[float, float] = (1.2, 2.0)
    trajectory_steps: int = 6
    min_visible_points: int = 32

    def __post_init__(self):
        self.objects_per_scene = tuple(self.objects_per_scene)
        self.points_per_object_raw = tuple(self.points_per_object_raw)
        self.overlap_range = tuple(self.overlap_range)
        self.view_extent = tuple(self.view_extent)
        low, high = self.overlap_range
        if not (0.0 < low <= high <= 1.0):
            raise GenerationError(
                f"overlap_range must lie within (0, 1], got {self.overlap_range}"
            )
        if self.target_points < 4:
            raise GenerationError(
                f"target_points must be >= 4, got {self.target_points}"
            )
        if not 1 <= self.objects_per_scene[0] <= self.objects_per_scene[1]:
            raise GenerationError(f"invalid objects_per_scene {self.objects_per_scene}")
        if not 2 <= self.category_count <= len(CATEGORY_LIBRARY):
            raise GenerationError(
                f"category_count must be in [2, {len(CATEGORY_LIBRARY)}], "
                f"got {self.category_count}"
            )
        max_predicates = len(CORE_PREDICATES) + len(EXTRA_PREDICATES)
        if not len(CORE_PREDICATES) <= self.predicate_count <= max_predicates:
            raise GenerationError(
                f"predicate_count must be in [{len(CORE_PREDICATES)}, {max_predicates}]"
            )
        if not 4 <= self.attribute_count <= len(ATTRIBUTE_NAMES):
            raise GenerationError(
                f"attribute_count must be in [4, {len(ATTRIBUTE_NAMES)}]"
            )
        if self.room_extent <= 2.0 or self.voxel_size <= 0 or self.point_noise < 0:
            raise GenerationError(
                "room_extent > 2, voxel_size > 0 and point_noise >= 0 required"
            )
        if not 1 <= self.points_per_object_raw[0] <= self.points_per_object_raw[1]:
            raise GenerationError(
                f"invalid points_per_object_raw {self.points_per_object_raw}"
            )
        if self.pose_mode not in ("yaw", "full"):
            raise GenerationError(
                f"pose_mode must be 'yaw' or 'full', got {self.pose_mode!r}"
            )


@dataclass(frozen=True)
class ScenePair:
    """Two graphs of one parent scene with their ground-truth relation."""

    pair_id: str
    source: SceneGraph
    target: SceneGraph
    anchors: AnchorSet
    gt_transform: RigidTransform
    overlap: float


NOISE_SCENARIOS = (
    "remove_relationships",
    "remove_objects",
    "remove_both",
    "relabel_objects",
    "relabel_both",
    "drop_geometric_edges",
)


@dataclass(frozen=True)
class NoiseSpec:
    """Semantic-noise scenario with its rate and seed."""

    scenario: str
    rate: float
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in NOISE_SCENARIOS:
            raise GenerationError(f"unknown noise scenario {self.scenario!r}")
        if self.scenario == "drop_geometric_edges":
            if self.rate != 1.0:
                raise GenerationError("drop_geometric_edges requires rate 1.0")
        elif not 0.15 <= self.rate <= 0.40:
            raise GenerationError(
                f"rate for {self.scenario} must be within [0.15, 0.40], got {self.rate}"
            )


@dataclass
class PlacedObject:
    """Generator ledger entry for one object instance."""

    instance: int
    category: int
    shape: str
    placement: str
    lo: np.ndarray  # axis-aligned bounds, (3,)
    hi: np.ndarray
    support: Optional[int] = None
    wall_side: Optional[int] = None
    lshape_corner: Tuple[bool, bool] = (False, False)

    @property
    def top_z(self) -> float:
        return float(self.hi[2])


@dataclass(frozen=True)
class CoverageRegion:
    """Union of xy rectangles (xmin, xmax, ymin, ymax) swept by a camera path."""

    boxes: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        inside = np.zeros(points.shape[0], dtype=bool)
        for xmin, xmax, ymin, ymax in self.boxes:
            inside |= (
                (points[:, 0] >= xmin)
                & (points[:, 0] <= xmax)
                & (points[:, 1] >= ymin)
                & (points[:, 1] <= ymax)
            )
        return inside


@dataclass
class GeneratedDataset:
    """Everything `gen` writes: parent scenes, sub-scenes and pairs."""

    config: GenConfig
    vocabulary: Vocabulary
    scenes: List[SceneGraph] = field(default_factory=list)
    subscenes: List[SceneGraph] = field(default_factory=list)
    pairs: List[ScenePair] = field(default_factory=list)
    skipped_subscenes: int = 0


def build_vocabulary(config: GenConfig) -> Vocabulary:
    """Dataset vocabulary derived from the configured sizes."""
    n_extra = config.predicate_count - len(CORE_PREDICATES)
    categories = CATEGORY_LIBRARY[: config.category_count]
    return Vocabulary(
        categories=tuple(entry[0] for entry in categories),
        predicates=CORE_PREDICATES + EXTRA_PREDICATES[:n_extra],
        attributes=ATTRIBUTE_NAMES[: config.attribute_count],
    )


def _scene_rng(config: GenConfig, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([config.seed, index, stream])


def stable_hash(text: str) -> int:
    """Process-independent integer for seeding streams from ids."""
    return zlib.crc32(text.encode("utf-8"))


def _boxes_overlap(lo_a, hi_a, lo_b, hi_b, eps: float = 1e-6) -> bool:
    return bool(np.all(lo_a < hi_b - eps) and np.all(lo_b < hi_a - eps))


def _box_gap(lo_a, hi_a, lo_b, hi_b) -> float:
    """Euclidean distance between two axis-aligned boxes (0 when touching)."""
    delta = np.maximum(0.0, np.maximum(lo_a - hi_b, lo_b - hi_a))
    return float(np.linalg.norm(delta))


def _sample_dims(rng: np.random.Generator, ranges) -> np.ndarray:
    return np.array([rng.uniform(low, high) for low, high in ranges])


def _try_place(
    rng: np.random.Generator,
    instance: int,
    category: int,
    placed: List[PlacedObject],
    extent: float,
) -> Optional[PlacedObject]:
    name, shape, placement, ranges = CATEGORY_LIBRARY[category]
    dims = _sample_dims(rng, ranges)
    walls = [obj for obj in placed if obj.placement == "wall"]
    supporters = [
        obj for obj in placed if obj.placement == "floor" and obj.shape != "cylinder"
    ]

    if placement == "mounted" and not walls:
        placement = "floor"
    if placement == "support" and not supporters:
        placement = "floor"

    if placement == "wall":
        length, thickness, height = dims
        side = int(rng.integers(4))
        along = rng.uniform(0.0, max(extent - length, 0.0))
        if side in (0, 2):
            y0 = 0.0 if side == 0 else extent - thickness
            lo = np.array([along, y0, 0.0])
            hi = np.array([along + length, y0 + thickness, height])
        else:
            x0 = extent - thickness if side == 1 else 0.0
            lo = np.array([x0, along, 0.0])
            hi = np.array([x0 + thickness, along + length, height])
        return PlacedObject(instance, category, shape, "wall", lo, hi, wall_side=side)

    if placement == "mounted":
        wall = walls[int(rng.integers(len(walls)))]
        width, depth, height = dims
        side = wall.wall_side
        base = rng.uniform(0.8, max(0.8, wall.hi[2] - height - 0.2))
        if side in (0, 2):
            span = (wall.lo[0], wall.hi[0])
            x = rng.uniform(span[0], max(span[0], span[1] - width))
            y = wall.hi[1] if side == 0 else wall.lo[1] - depth
            lo = np.array([x, y, base])
            hi = np.array([x + width, y + depth, base + height])
        else:
            span = (wall.lo[1], wall.hi[1])
            y = rng.uniform(span[0], max(span[0], span[1] - width))
            x = wall.lo[0] - depth if side == 1 else wall.hi[0]
            lo = np.array([x, y, base])
            hi = np.array([x + depth, y + width, base + height])
        return PlacedObject(
            instance, category, shape, "mounted", lo, hi, wall_side=side
        )

    width, depth, height = dims
    if shape == "cylinder":
        depth = width
    elif rng.random() < 0.5:
        width, depth = depth, width
    corner = (bool(rng.random() < 0.5), bool(rng.random() < 0.5))

    if placement == "support":
        candidates = [
            s
            for s in supporters
            if (s.hi[0] - s.lo[0]) >= width and (s.hi[1] - s.lo[1]) >= depth
        ]
        if not candidates:
            placement = "floor"
        else:
            host = candidates[int(rng.integers(len(candidates)))]
            x = rng.uniform(host.lo[0], host.hi[0] - width)
            y = rng.uniform(host.lo[1], host.hi[1] - depth)
            lo = np.array([x, y, host.hi[2]])
            hi = np.array([x + width, y + depth, host.hi[2] + height])
            return PlacedObject(
                instance,
                category,
                shape,
                "support",
                lo,
                hi,
                support=host.instance,
                lshape_corner=corner,
            )

    if walls and rng.random() < 0.35:
        wall = walls[int(rng.integers(len(walls)))]
        side = wall.wall_side
        if side in (0, 2):
            x = rng.uniform(wall.lo[0], max(wall.lo[0], wall.hi[0] - width))
            y = wall.hi[1] if side == 0 else wall.lo[1] - depth
        else:
            y = rng.uniform(wall.lo[1], max(wall.lo[1], wall.hi[1] - depth))
            x = wall.lo[0] - width if side == 1 else wall.hi[0]
    else:
        x = rng.uniform(0.1, max(0.1, extent - width - 0.1))
        y = rng.uniform(0.1, max(0.1, extent - depth - 0.1))
    lo = np.array([x, y, 0.0])
    hi = np.array([x + width, y + depth, height])
    if np.any(lo[:2] < 0.0) or np.any(hi[:2] > extent):
        return None
    return PlacedObject(
        instance, category, shape, "floor", lo, hi, lshape_corner=corner
    )


def _place_objects(
    rng: np.random.Generator, config: GenConfig, count: int, first_instance: int
) -> List[PlacedObject]:
    placed: List[PlacedObject] = []
    for slot in range(count):
        for _ in range(50):
            category = int(rng.integers(config.category_count))
            candidate = _try_place(
                rng, first_instance + slot, category, placed, config.room_extent
            )
            if candidate is None:
                continue
            clash = any(
                _boxes_overlap(candidate.lo, candidate.hi, other.lo, other.hi)
                for other in placed
                if other.instance != candidate.support
            )
            if not clash:
                placed.append(candidate)
                break
        else:
            logger.debug(
                f"could not place object slot {slot}; scene keeps {len(placed)} objects"
            )
    return placed


def _sample_box_surface(
    rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int
) -> np.ndarray:
    size = hi - lo
    areas = np.array(
        [size[1] * size[2]] * 2 + [size[0] * size[2]] * 2 + [size[0] * size[1]] * 2
    )
    face = rng.choice(6, size=n, p=areas / areas.sum())
    points = lo + rng.random((n, 3)) * size
    axis = face // 2
    points[np.arange(n), axis] = np.where(face % 2 == 0, lo[axis], hi[axis])
    return points


def _sample_cylinder_surface(
    rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int
) -> np.ndarray:
    radius = min(hi[0] - lo[0], hi[1] - lo[1]) / 2.0
    height = hi[2] - lo[2]
    center = (lo[:2] + hi[:2]) / 2.0
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius**2
    areas = np.array([side_area, cap_area, cap_area])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    cap_z = np.where(part == 1, lo[2], hi[2])
    z = np.where(part == 0, lo[2] + rng.random(n) * height, cap_z)
    x = center[0] + r * np.cos(theta)
    y = center[1] + r * np.sin(theta)
    return np.column_stack([x, y, z])


def _lshape_boxes(obj: PlacedObject) -> List[Tuple[np.ndarray, np.ndarray]]:
    lo, hi = obj.lo, obj.hi
    size = hi - lo
    flip_x, flip_y = obj.lshape_corner
    if flip_y:
        bar_a = (np.array([lo[0], hi[1] - 0.45 * size[1], lo[2]]), hi.copy())
    else:
        bar_a = (lo.copy(), np.array([hi[0], lo[1] + 0.45 * size[1], hi[2]]))
    if flip_x:
        bar_b = (np.array([hi[0] - 0.45 * size[0], lo[1], lo[2]]), hi.copy())
    else:
        bar_b = (lo.copy(), np.array([lo[0] + 0.45 * size[0], hi[1], hi[2]]))
    return [bar_a, bar_b]


def _sample_lshape_surface(
    rng: np.random.Generator, obj: PlacedObject, n: int
) -> np.ndarray:
    boxes = _lshape_boxes(obj)
    collected = []
    for own, (lo, hi) in enumerate(boxes):
        other_lo, other_hi = boxes[1 - own]
        candidates = _sample_box_surface(rng, lo, hi, n)
        inside = (candidates > other_lo + 1e-9) & (candidates < other_hi - 1e-9)
        interior = np.all(inside, axis=1)
        collected.append(candidates[~interior])
    points = np.concatenate(collected, axis=0)
    order = rng.permutation(points.shape[0])
    if points.shape[0] >= n:
        return points[order[:n]]
    return points[np.arange(n) % points.shape[0]]


def _surface_area(obj: PlacedObject) -> float:
    size = obj.hi - obj.lo
    if obj.shape == "cylinder":
        radius = min(size[0], size[1]) / 2.0
        return float(2.0 * np.pi * radius * size[2] + 2.0 * np.pi * radius**2)
    return float(2.0 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2]))


def _sample_surface(
    rng: np.random.Generator, obj: PlacedObject, config: GenConfig
) -> np.ndarray:
    low, high = config.points_per_object_raw
    count = int(np.clip(round(_surface_area(obj) * 400.0), low, high))
    if obj.shape == "cylinder":
        return _sample_cylinder_surface(rng, obj.lo, obj.hi, count)
    if obj.shape == "lshape":
        return _sample_lshape_surface(rng, obj, count)
    return _sample_box_surface(rng, obj.lo, obj.hi, count)


def _derive_relationships(
    placed: List[PlacedObject], vocabulary: Vocabulary
) -> List[Relationship]:
    predicate = {name: vocabulary.index("predicates", name) for name in CORE_PREDICATES}
    relationships: List[Relationship] = []
    seen = set()

    def add(subject: int, obj: int, name: str) -> None:
        triple = (subject, obj, predicate[name])
        if subject != obj and triple not in seen:
            seen.add(triple)
            geometric = name in GEOMETRIC_PREDICATES
            relationships.append(
                Relationship(subject, obj, predicate[name], geometric)
            )

    for item in placed:
        if item.support is not None:
            add(item.instance, item.support, STANDING_ON)
    for item in placed:
        if item.placement == "wall":
            continue
        for wall in placed:
            if wall.placement != "wall":
                continue
            if _box_gap(item.lo, item.hi, wall.lo, wall.hi) <= CONTACT_GAP:
                add(item.instance, wall.instance, ATTACHED_TO)
    floor_items = [item for item in placed if item.placement == "floor"]
    for a_pos, a in enumerate(floor_items):
        for b in floor_items[a_pos + 1 :]:
            gap = _box_gap(a.lo[:2], a.hi[:2], b.lo[:2], b.hi[:2])
            if gap > ADJACENCY_GAP:
                continue
            key_a = ((a.lo[0] + a.hi[0]) / 2.0, (a.lo[1] + a.hi[1]) / 2.0, a.instance)
            key_b = ((b.lo[0] + b.hi[0]) / 2.0, (b.lo[1] + b.hi[1]) / 2.0, b.instance)
            left, right = (a, b) if key_a < key_b else (b, a)
            add(left.instance, right.instance, LEFT)
            add(right.instance, left.instance, RIGHT)
    for a_pos, a in enumerate(placed):
        for b in placed[a_pos + 1 :]:
            if a.category == b.category:
                add(a.instance, b.instance, SAME_CATEGORY)
    return relationships


def generate_scene_with_layout(
    config: GenConfig, index: int
) -> Tuple[SceneGraph, List[PlacedObject]]:
    """Generate scene `index` and return the placement ledger alongside it."""
    rng = _scene_rng(config, index)
    vocabulary = build_vocabulary(config)
    low, high = config.objects_per_scene
    count = int(rng.integers(low, high + 1))
    placed = _place_objects(rng, config, count, first_instance=index * 1000)

    nodes = []
    for item in placed:
        points = _sample_surface(rng, item, config)
        n_attributes = int(rng.integers(1, 5))
        attributes = rng.choice(
            config.attribute_count, size=n_attributes, replace=False
        )
        nodes.append(
            ObjectNode(
                id=item.instance,
                category=item.category,
                attributes=frozenset(int(a) for a in attributes),
                cloud=InstancePointCloud(points),
            )
        )
    graph = SceneGraph(
        scene_id=f"scene_{index:04d}",
        nodes=tuple(nodes),
        relationships=tuple(_derive_relationships(placed, vocabulary)),
        vocabulary=vocabulary,
    )
    logger.debug(
        f"generated {graph.scene_id}: {len(graph.nodes)} nodes, "
        f"{len(graph.relationships)} edges"
    )
    return graph, placed


def generate_scene(config: GenConfig, index: int) -> SceneGraph:
    """
    Generate a synthetic room populated with primitive-composed objects.

    Args:
        config: Generator configuration
        index: Scene index; (config.seed, index) fixes the output

    Returns:
        Parent SceneGraph with raw (not resampled) surface clouds
    """
    return generate_scene_with_layout(config, index)[0]


def sweep_region(rng: np.random.Generator, config: GenConfig) -> CoverageRegion:
    """Boxes around the waypoints of a random camera walk through the room."""
    extent = config.room_extent
    half = rng.uniform(*config.view_extent) / 2.0
    position = rng.uniform(0.0, extent, size=2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    boxes = []
    for _ in range(config.trajectory_steps):
        x, y = position
        boxes.append([x - half, x + half, y - half, y + half])
        heading += rng.normal(0.0, 0.6)
        step = np.array([np.cos(heading), np.sin(heading)]) * 0.4
        position = np.clip(position + step, 0.0, extent)
    return CoverageRegion(np.array(boxes))


def crop_to_region(
    scene: SceneGraph,
    region: CoverageRegion,
    scene_id: str,
    pose: RigidTransform,
    min_points: int = 1,
    id_base: int = SUBSCENE_ID_BASE,
    rng: Optional[np.random.Generator] = None,
) -> Optional[SceneGraph]:
    """
    Restrict `scene` to objects seen inside `region`, expressed in a local frame.

    Points are cropped to the region; `pose` maps the local frame to the
    parent frame. Returns None when no object keeps `min_points` points.
    """
    to_local = pose.inverse()
    kept = []
    for node in scene.nodes:
        mask = region.contains(node.cloud.points)
        if int(mask.sum()) >= min_points:
            kept.append((node, node.cloud.points[mask]))
    if not kept:
        return None

    order = np.arange(len(kept)) if rng is None else rng.permutation(len(kept))
    local_ids = {kept[pos][0].id: id_base + int(rank) for rank, pos in enumerate(order)}
    nodes = tuple(
        ObjectNode(
            id=local_ids[node.id],
            category=node.category,
            attributes=node.attributes,
            cloud=InstancePointCloud(to_local.apply(points)),
            instance=node.instance_id,
        )
        for node, points in kept
    )
    relationships = tuple(
        replace(rel, subject=local_ids[rel.subject], object=local_ids[rel.object])
        for rel in scene.relationships
        if rel.subject in local_ids and rel.object in local_ids
    )
    return SceneGraph(
        scene_id=scene_id,
        nodes=nodes,
        relationships=relationships,
        vocabulary=scene.vocabulary,
        pose=pose,
        parent_id=scene.lineage,
    )


def _random_pose(rng: np.random.Generator, config: GenConfig) -> RigidTransform:
    return RigidTransform.random(
        rng,
        translation_scale=config.room_extent / 2.0,
        yaw_only=config.pose_mode == "yaw",
    )


def split_subscenes(
    scene: SceneGraph, config: GenConfig, count: int
) -> List[SceneGraph]:
    """
    Cut `count` camera-coverage sub-scenes out of a parent scene.

    Each sub-scene keeps objects with at least `config.min_visible_points`
    points inside a swept region, cropped to that region, with induced
    relationships, re-expressed under a random pose stored in `pose`.
    Sub-scenes whose region hits no object are skipped with a warning.
    """
    if len(scene.nodes) < 2:
        raise GenerationError(f"{scene.scene_id}: splitting needs at least 2 objects")
    rng = np.random.default_rng([config.seed, stable_hash(scene.scene_id), 1])
    scene_number = stable_hash(scene.scene_id) % 10_000
    subscenes = []
    skipped = 0
    for sub in range(count):
        region = sweep_region(rng, config)
        pose = _random_pose(rng, config)
        graph = crop_to_region(
            scene,
            region,
            scene_id=f"{scene.scene_id}_sub{sub:02d}",
            pose=pose,
            min_points=config.min_visible_points,
            id_base=SUBSCENE_ID_BASE + scene_number * 100_000 + (sub + 1) * 1000,
            rng=rng,
        )
        if graph is None:
            skipped += 1
            continue
        subscenes.append(graph)
    if skipped:
        logger.warning(f"{scene.scene_id}: skipped {skipped} empty sub-scene(s)")
    return subscenes


def relative_transform(source: SceneGraph, target: SceneGraph) -> RigidTransform:
    """Ground-truth transform mapping source-frame points into the target frame."""
    source_pose = source.pose or RigidTransform.identity()
    target_pose = target.pose or RigidTransform.identity()
    return target_pose.inverse().compose(source_pose)


def _occupied_voxels(points: np.ndarray, voxel: float) -> set:
    keys = np.floor(points / voxel).astype(np.int64)
    return set(map(tuple, np.unique(keys, axis=0).tolist()))


def compute_overlap(
    a: SceneGraph, b: SceneGraph, gt: RigidTransform, voxel: float
) -> float:
    """
    Voxel overlap |occ(a) & occ(b)| / min(|occ(a)|, |occ(b)|).

    `gt` maps a's frame into b's frame. Both clouds are voxelized in the
    frame of the graph whose scene_id sorts first, so the measure is
    symmetric under swapping (a, gt) with (b, gt^-1).
    """
    points_a = a.all_points()
    points_b = b.all_points()
    if points_a.shape[0] == 0 or points_b.shape[0] == 0:
        return 0.0
    if a.scene_id <= b.scene_id:
        points_b = gt.inverse().apply(points_b)
    else:
        points_a = gt.apply(points_a)
    occupied_a = _occupied_voxels(points_a, voxel)
    occupied_b = _occupied_voxels(points_b, voxel)
    shared = len(occupied_a & occupied_b)
    return shared / min(len(occupied_a), len(occupied_b))


def extract_anchors(a: SceneGraph, b: SceneGraph) -> AnchorSet:
    """All (a id, b id) pairs that share an underlying instance."""
    if a.lineage != b.lineage:
        raise GenerationError(
            f"cannot extract anchors across parents {a.lineage!r} and {b.lineage!r}"
        )
    by_instance = {node.instance_id: node.id for node in b.nodes}
    return AnchorSet(
        tuple(
            (node.id, by_instance[node.instance_id])
            for node in a.nodes
            if node.instance_id in by_instance
        )
    )


def fps_resample(
    cloud: InstancePointCloud, target: int, seed: int = 0
) -> InstancePointCloud:
    """
    Resample a cloud to exactly `target` points.

    Larger clouds use farthest point sampling started at the point nearest the
    centroid (ties by lowest index); smaller clouds are repeated cyclically.
    The selection is deterministic, so `seed` does not affect the result.
    """
    points = cloud.points
    n = points.shape[0]
    if n <= target:
        return InstancePointCloud(points[np.arange(target) % n])

    centroid = points.mean(axis=0)
    first = int(np.argmin(np.sum((points - centroid) ** 2, axis=1)))
    selected = np.empty(target, dtype=np.int64)
    selected[0] = first
    min_dist = np.sum((points - points[first]) ** 2, axis=1)
    min_dist[first] = -1.0
    for step in range(1, target):
        chosen = int(np.argmax(min_dist))
        selected[step] = chosen
        dist = np.sum((points - points[chosen]) ** 2, axis=1)
        np.minimum(min_dist, dist, out=min_dist, where=min_dist >= 0.0)
        min_dist[chosen] = -1.0
    return InstancePointCloud(points[selected])


def finalize_graph(
    graph: SceneGraph, config: GenConfig, noise_stream: int = 0
) -> SceneGraph:
    """
    Resample every node to `target_points`, add point jitter and quantize to f32.

    Quantizing makes the in-memory graph identical to what binary cloud files
    hold, so saved datasets reload bit-exactly.
    """
    rng = np.random.default_rng(
        [config.seed, stable_hash(graph.scene_id), 2, noise_stream]
    )
    nodes = []
    for node in graph.nodes:
        points = fps_resample(node.cloud, config.target_points).points
        if config.point_noise > 0:
            points = points + rng.normal(0.0, config.point_noise, size=points.shape)
        points = points.astype(np.float32).astype(np.float64)
        nodes.append(replace(node, cloud=InstancePointCloud(points)))
    return replace(graph, nodes=tuple(nodes))


def build_scene_pairs(
    subscenes: Sequence[SceneGraph], config: GenConfig
) -> List[ScenePair]:
    """Pairs of sub-scenes of one parent whose overlap lies in `overlap_range`."""
    low, high = config.overlap_range
    pairs = []
    for i, source in enumerate(subscenes):
        for target in subscenes[i + 1 :]:
            if source.lineage != target.lineage:
                continue
            gt = relative_transform(source, target)
            overlap = compute_overlap(source, target, gt, config.voxel_size)
            if not low <= overlap <= high:
                continue
            anchors = extract_anchors(source, target)
            if len(anchors) == 0:
                continue
            pairs.append(
                ScenePair(
                    pair_id=f"{source.scene_id}__{target.scene_id}",
                    source=source,
                    target=target,
                    anchors=anchors,
                    gt_transform=gt,
                    overlap=float(overlap),
                )
            )
    return pairs


def generate_dataset(config: GenConfig) -> GeneratedDataset:
    """
    Run the full benchmark generation: scenes, sub-scenes, pairs.

    Overlap is measured on the raw cropped clouds; stored graphs are resampled
    to `target_points` with independent per-graph jitter.
    """
    dataset = GeneratedDataset(config=config, vocabulary=build_vocabulary(config))
    for index in range(config.num_scenes):
        scene = generate_scene(config, index)
        dataset.scenes.append(finalize_graph(scene, config))
        if len(scene.nodes) < 2:
            logger.warning(f"{scene.scene_id}: fewer than 2 objects, no sub-scenes")
            continue
        raw_subscenes = split_subscenes(scene, config, config.subscenes_per_scene)
        dataset.skipped_subscenes += config.subscenes_per_scene - len(raw_subscenes)
        finalized = {
            graph.scene_id: finalize_graph(graph, config) for graph in raw_subscenes
        }
        dataset.subscenes.extend(finalized.values())
        for pair in build_scene_pairs(raw_subscenes, config):
            dataset.pairs.append(
                replace(
                    pair,
                    source=finalized[pair.source.scene_id],
                    target=finalized[pair.target.scene_id],
                )
            )
        logger.info(
            f"{scene.scene_id}: {len(scene.nodes)} objects, "
            f"{len(raw_subscenes)} sub-scenes, "
            f"{len(dataset.pairs)} pairs so far"
        )
    return dataset


def _ceil_count(rate: float, total: int) -> int:
    return int(math.ceil(rate * total - 1e-9))


def _choose(rng: np.random.Generator, total: int, count: int) -> List[int]:
    """`count` distinct positions out of `total`; no draw when count is 0."""
    if not count:
        return []
    return rng.choice(total, size=count, replace=False).tolist()


def inject_noise(graph: SceneGraph, spec: NoiseSpec) -> SceneGraph:
    """
    Apply one semantic-noise scenario to a graph.

    Object removal keeps at least one node so the result stays alignable.
    Relabelled edges never duplicate an existing triple. When either rule (or a
    one-category vocabulary) leaves fewer changes than the rate asks for, a
    warning names the shortfall.
    """
    rng = np.random.default_rng(
        [spec.seed, stable_hash(graph.scene_id), stable_hash(spec.scenario)]
    )
    vocab = graph.vocabulary
    nodes = list(graph.nodes)
    relationships = list(graph.relationships)

    if spec.scenario == "drop_geometric_edges":
        kept = tuple(rel for rel in relationships if not rel.geometric)
        return replace(graph, relationships=kept)

    if spec.scenario in ("remove_relationships", "remove_both"):
        n_remove = _ceil_count(spec.rate, len(relationships))
        drop = set(_choose(rng, len(relationships), n_remove))
        relationships = [
            rel for pos, rel in enumerate(relationships) if pos not in drop
        ]

    if spec.scenario in ("remove_objects", "remove_both"):
        wanted = _ceil_count(spec.rate, len(nodes))
        n_remove = min(wanted, max(len(nodes) - 1, 0))
        if n_remove < wanted:
            logger.warning(
                f"{graph.scene_id}: removing {n_remove} of {wanted} objects "
                f"so one node remains"
            )
        removed = {nodes[pos].id for pos in _choose(rng, len(nodes), n_remove)}
        nodes = [node for node in nodes if node.id not in removed]
        relationships = [
            rel
            for rel in relationships
            if rel.subject not in removed and rel.object not in removed
        ]

    if spec.scenario in ("relabel_objects", "relabel_both"):
        n_relabel = _ceil_count(spec.rate, len(nodes))
        stuck = 0
        for pos in _choose(rng, len(nodes), n_relabel):
            node = nodes[pos]
            others = [c for c in range(len(vocab.categories)) if c != node.category]
            if not others:
                stuck += 1
                continue
            category = int(others[int(rng.integers(len(others)))])
            nodes[pos] = replace(node, category=category)
        if stuck:
            logger.warning(
                f"{graph.scene_id}: {stuck} of {n_relabel} objects kept their "
                f"category (no other category in the vocabulary)"
            )

    if spec.scenario == "relabel_both":
        n_relabel = _ceil_count(spec.rate, len(relationships))
        chosen = _choose(rng, len(relationships), n_relabel)
        triples = {rel.triple for rel in relationships}
        stuck = 0
        for pos in chosen:
            rel = relationships[pos]
            options = [
                p
                for p in range(len(vocab.predicates))
                if p != rel.predicate and (rel.subject, rel.object, p) not in triples
            ]
            if not options:
                stuck += 1
                continue
            predicate = int(options[int(rng.integers(len(options)))])
            triples.discard(rel.triple)
            triples.add((rel.subject, rel.object, predicate))
            geometric = vocab.predicates[predicate] in GEOMETRIC_PREDICATES
            relationships[pos] = replace(
                rel, predicate=predicate, geometric=geometric
            )
        if stuck:
            logger.warning(
                f"{graph.scene_id}: {stuck} of {n_relabel} relationships kept "
                f"their predicate (every other predicate already links the pair)"
            )

    return replace(graph, nodes=tuple(nodes), relationships=tuple(relationships))


def random_noise_spec(scenario: str, seed: int, rng: np.random.Generator) -> NoiseSpec:
    """Noise spec with a rate drawn uniformly from [0.15, 0.40]."""
    rate = 1.0 if scenario == "drop_geometric_edges" else float(rng.uniform(0.15, 0.40))
    return NoiseSpec(scenario=scenario, rate=rate, seed=seed)


def overlap_histogram(overlaps: Sequence[float]) -> Dict[str, int]:
    """Pair counts per 10% overlap bucket ('0-10', ..., '90-100')."""
    counts = {f"{low}-{low + 10}": 0 for low in range(0, 100, 10)}
    for value in overlaps:
        bucket = min(int(value * 10.0), 9) * 10
        counts[f"{bucket}-{bucket + 10}"] += 1
    return counts


# --- dataset files -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row; paths are relative to the dataset directory."""

    pair_id: str
    source_path: str
    target_path: str
    anchors: Tuple[Tuple[int, int], ...]
    gt_transform: Tuple[float, ...]
    overlap: float
    parent: str

    def to_dict(self) -> Dict:
        return {
            "pair_id": self.pair_id,
            "source_path": self.source_path,
            "target_path": self.target_path,
            "anchors": [list(pair) for pair in self.anchors],
            "gt_transform": list(self.gt_transform),
            "overlap": self.overlap,
            "parent": self.parent,
        }


def write_dataset(dataset: GeneratedDataset, out_dir: Path) -> Path:
    """Write scenes, sub-scenes and `manifest.json`; returns the manifest path."""
    out_dir = Path(out_dir)
    for scene in dataset.scenes:
        path = out_dir / "scenes" / f"{scene.scene_id}.json"
        save_scene_graph(scene, path, binary_clouds=True)
    for graph in dataset.subscenes:
        path = out_dir / "subscenes" / f"{graph.scene_id}.json"
        save_scene_graph(graph, path, binary_clouds=True)
    entries = [
        ManifestEntry(
            pair_id=pair.pair_id,
            source_path=f"subscenes/{pair.source.scene_id}.json",
            target_path=f"subscenes/{pair.target.scene_id}.json",
            anchors=pair.anchors.pairs,
            gt_transform=tuple(pair.gt_transform.matrix().reshape(-1).tolist()),
            overlap=pair.overlap,
            parent=pair.source.lineage,
        ).to_dict()
        for pair in dataset.pairs
    ]
    manifest_path = out_dir / "manifest.json"
    text = json.dumps(entries, sort_keys=True, indent=2) + "\n"
    manifest_path.write_text(text, encoding="utf-8")
    return manifest_path


def load_manifest(path: Path) -> List[ManifestEntry]:
    path = Path(path)
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise GenerationError(f"{path}: cannot read manifest ({exc})") from exc
    return [
        ManifestEntry(
            pair_id=row["pair_id"],
            source_path=row["source_path"],
            target_path=row["target_path"],
            anchors=tuple((int(a), int(b)) for a, b in row["anchors"]),
            gt_transform=tuple(float(v) for v in row["gt_transform"]),
            overlap=float(row["overlap"]),
            parent=row.get("parent", ""),
        )
        for row in rows
    ]


class GraphCache:
    """Loads each scene-graph file once."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._graphs: Dict[str, SceneGraph] = {}

    def get(self, relative_path: str) -> SceneGraph:
        if relative_path not in self._graphs:
            self._graphs[relative_path] = load_scene_graph(self.root / relative_path)
        return self._graphs[relative_path]


def load_pairs(
    data_dir: Path,
    entries: Sequence[ManifestEntry],
    cache: Optional[GraphCache] = None,
) -> List[ScenePair]:
    """Materialize manifest entries into ScenePairs."""
    cache = cache or GraphCache(data_dir)
    return [
        ScenePair(
            pair_id=entry.pair_id,
            source=cache.get(entry.source_path),
            target=cache.get(entry.target_path),
            anchors=AnchorSet(entry.anchors),
            gt_transform=RigidTransform.from_matrix(
                np.reshape(entry.gt_transform, (4, 4))
            ),
            overlap=entry.overlap,
        )
        for entry in entries
    ]


def split_by_parent(
    entries: Sequence[ManifestEntry], test_fraction: float = 0.12, seed: int = 0
) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """Train/test split by parent scene; no parent appears on both sides."""
    parents = sorted({entry.parent for entry in entries})
    if not parents:
        return [], []
    order = np.random.default_rng(seed).permutation(len(parents))
    n_test = max(1, int(round(test_fraction * len(parents)))) if len(parents) > 1 else 0
    test_parents = {parents[pos] for pos in order[:n_test]}
    train = [entry for entry in entries if entry.parent not in test_parents]
    test = [entry for entry in entries if entry.parent in test_parents]
    return train, test


def restrict_to_instances(graph: SceneGraph, instances: Sequence[int]) -> SceneGraph:
    """Induced subgraph on nodes whose instance is in `instances`."""
    wanted = set(instances)
    keep = [node.id for node in graph.nodes if node.instance_id in wanted]
    return restrict(graph, keep)
