"""3D scene graph data model, vocabularies and serialization."""
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np
from jsonschema import Draft7Validator
from scipy.spatial import ConvexHull, QhullError

from src.geometry import RigidTransform

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"SGPC"
_CLOUD_HEADER = struct.Struct("<4sI")
_CLOUD_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


class SceneGraphError(ValueError):
    """Base class for scene-graph errors."""


class SceneGraphParseError(SceneGraphError):
    """Malformed scene-graph or point-cloud file."""


class SceneGraphValidationError(SceneGraphError):
    """Structurally well-formed input that violates a scene-graph invariant."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered category, predicate and attribute names shared by a dataset."""

    categories: Tuple[str, ...]
    predicates: Tuple[str, ...]
    attributes: Tuple[str, ...]

    def __post_init__(self):
        for kind in ("categories", "predicates", "attributes"):
            names = tuple(getattr(self, kind))
            object.__setattr__(self, kind, names)
            if any(not isinstance(name, str) or not name for name in names):
                raise SceneGraphValidationError(
                    f"vocabulary {kind} must be non-empty strings"
                )
            if len(set(names)) != len(names):
                raise SceneGraphValidationError(
                    f"vocabulary {kind} contains duplicates"
                )

    def index(self, kind: str, name: str) -> int:
        """Index of `name` within the list `kind` ('categories', ...)."""
        names = getattr(self, kind)
        try:
            return names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not in vocabulary {kind}") from None

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "categories": list(self.categories),
            "predicates": list(self.predicates),
            "attributes": list(self.attributes),
        }


@dataclass(frozen=True, eq=False)
class InstancePointCloud:
    """Per-instance point cloud, (n, 3) coordinates in meters."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise SceneGraphValidationError(
                f"point cloud must have shape (n, 3), got {points.shape}"
            )
        if points.shape[0] < 1:
            raise SceneGraphValidationError("point cloud needs at least one point")
        if not np.all(np.isfinite(points)):
            raise SceneGraphValidationError("point cloud coordinates must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstancePointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]

    def transformed(self, transform: RigidTransform) -> "InstancePointCloud":
        return InstancePointCloud(transform.apply(self.points))


@dataclass(frozen=True)
class ObjectNode:
    """Object instance node; `instance` is the parent-scene identity, if known."""

    id: int
    category: int
    attributes: FrozenSet[int]
    cloud: InstancePointCloud
    instance: Optional[int] = None

    def __post_init__(self):
        attributes = frozenset(int(a) for a in self.attributes)
        object.__setattr__(self, "attributes", attributes)

    @property
    def instance_id(self) -> int:
        return self.id if self.instance is None else self.instance


@dataclass(frozen=True)
class Relationship:
    """Directed edge (subject -> object) labelled with a predicate index."""

    subject: int
    object: int
    predicate: int
    geometric: bool = False

    @property
    def triple(self) -> Tuple[int, int, int]:
        return (self.subject, self.object, self.predicate)


@dataclass(frozen=True)
class SceneGraph:
    """
    A scene graph (N, R) over a shared vocabulary.

    `pose` maps the graph's local frame into its parent-scene frame; it is
    ground truth for generated sub-scenes and None for parent scenes.
    """

    scene_id: str
    nodes: Tuple[ObjectNode, ...]
    relationships: Tuple[Relationship, ...]
    vocabulary: Vocabulary
    pose: Optional[RigidTransform] = None
    parent_id: Optional[str] = None
    _index: Dict[int, int] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "relationships", tuple(self.relationships))
        index: Dict[int, int] = {}
        vocab = self.vocabulary
        for position, node in enumerate(self.nodes):
            if node.id in index:
                raise SceneGraphValidationError(f"duplicate node id {node.id}")
            index[node.id] = position
            if not 0 <= node.category < len(vocab.categories):
                raise SceneGraphValidationError(
                    f"node {node.id}: category index {node.category} out of range"
                )
            for attribute in node.attributes:
                if not 0 <= attribute < len(vocab.attributes):
                    raise SceneGraphValidationError(
                        f"node {node.id}: attribute index {attribute} out of range"
                    )
        triples = set()
        for position, rel in enumerate(self.relationships):
            for endpoint in (rel.subject, rel.object):
                if endpoint not in index:
                    raise SceneGraphValidationError(
                        f"relationship {position} references node id {endpoint} "
                        f"not present in nodes"
                    )
            if rel.subject == rel.object:
                raise SceneGraphValidationError(
                    f"relationship {position} is a self-loop on node {rel.subject}"
                )
            if not 0 <= rel.predicate < len(vocab.predicates):
                raise SceneGraphValidationError(
                    f"relationship {position}: "
                    f"predicate index {rel.predicate} out of range"
                )
            if rel.triple in triples:
                raise SceneGraphValidationError(
                    f"relationship {position} duplicates triple {rel.triple}"
                )
            triples.add(rel.triple)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> List[int]:
        return [node.id for node in self.nodes]

    @property
    def lineage(self) -> str:
        """Identifier of the parent scene this graph derives from."""
        return self.parent_id if self.parent_id is not None else self.scene_id

    def node(self, node_id: int) -> ObjectNode:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise KeyError(f"node id {node_id} not in scene {self.scene_id}") from None

    def index_of(self, node_id: int) -> int:
        return self._index[node_id]

    def has_node(self, node_id: int) -> bool:
        return node_id in self._index

    def degree(self, node_id: int) -> int:
        ends = ((rel.subject, rel.object) for rel in self.relationships)
        return sum(1 for pair in ends if node_id in pair)

    def all_points(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3))
        return np.concatenate([node.cloud.points for node in self.nodes], axis=0)

    def with_changes(self, **changes) -> "SceneGraph":
        """Copy with fields replaced (re-validated)."""
        return replace(self, **changes)


@dataclass(frozen=True)
class AnchorSet:
    """Ground-truth node correspondences (graph-1 id, graph-2 id); injective."""

    pairs: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        firsts = [a for a, _ in pairs]
        seconds = [b for _, b in pairs]
        if len(set(firsts)) != len(firsts) or len(set(seconds)) != len(seconds):
            raise SceneGraphValidationError("anchor pairs must be injective")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_dict(self) -> Dict[int, int]:
        return dict(self.pairs)


SCENE_GRAPH_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "Scene graph",
    "type": "object",
    "required": ["scene_id", "vocabulary", "nodes", "relationships"],
    "properties": {
        "scene_id": {"type": "string"},
        "parent_id": {"type": ["string", "null"]},
        "vocabulary": {
            "type": "object",
            "required": ["categories", "predicates", "attributes"],
            "properties": {
                kind: {"type": "array", "items": {"type": "string", "minLength": 1}}
                for kind in ("categories", "predicates", "attributes")
            },
        },
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "category", "attributes", "cloud"],
                "properties": {
                    "id": {"type": "integer"},
                    "instance": {"type": ["integer", "null"]},
                    "category": {"type": "integer", "minimum": 0},
                    "attributes": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0},
                    },
                    "cloud": {
                        "oneOf": [
                            {
                                "type": "object",
                                "required": ["file", "count"],
                                "properties": {
                                    "file": {"type": "string"},
                                    "count": {"type": "integer", "minimum": 1},
                                },
                            },
                            {
                                "type": "object",
                                "required": ["points"],
                                "properties": {
                                    "points": {
                                        "type": "array",
                                        "minItems": 1,
                                        "items": {
                                            "type": "array",
                                            "items": {"type": "number"},
                                            "minItems": 3,
                                            "maxItems": 3,
                                        },
                                    }
                                },
                            },
                        ]
                    },
                },
            },
        },
        "relationships": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject", "object", "predicate", "geometric"],
                "properties": {
                    "subject": {"type": "integer"},
                    "object": {"type": "integer"},
                    "predicate": {"type": "integer", "minimum": 0},
                    "geometric": {"type": "boolean"},
                },
            },
        },
        "pose": {
            "type": ["array", "null"],
            "items": {"type": "number"},
            "minItems": 16,
            "maxItems": 16,
        },
    },
}

_VALIDATOR = Draft7Validator(SCENE_GRAPH_SCHEMA)


def write_point_cloud(points: np.ndarray, path: PathLike) -> None:
    """Write points as little-endian SGPC (magic, u32 count, count*3 f32)."""
    points = np.asarray(points, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_CLOUD_HEADER.pack(CLOUD_MAGIC, points.shape[0]))
        handle.write(points.astype(_CLOUD_DTYPE).tobytes(order="C"))


def read_point_cloud(path: PathLike) -> np.ndarray:
    """Read an SGPC file into an (n, 3) float64 array."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise SceneGraphParseError(f"{path}: cannot read point cloud ({exc})") from exc
    if len(payload) < _CLOUD_HEADER.size:
        raise SceneGraphParseError(f"{path}: truncated point cloud header")
    magic, count = _CLOUD_HEADER.unpack_from(payload)
    if magic != CLOUD_MAGIC:
        raise SceneGraphParseError(
            f"{path}: bad magic {magic!r}, expected {CLOUD_MAGIC!r}"
        )
    expected = _CLOUD_HEADER.size + count * 3 * _CLOUD_DTYPE.itemsize
    if len(payload) != expected:
        raise SceneGraphParseError(
            f"{path}: expected {expected} bytes for {count} points, "
            f"found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=_CLOUD_DTYPE, offset=_CLOUD_HEADER.size)
    return data.reshape(count, 3).astype(np.float64)


def graph_to_dict(
    graph: SceneGraph, cloud_dir: Optional[Path] = None, base_dir: Optional[Path] = None
) -> Dict:
    """JSON-ready dict; clouds are inlined unless `cloud_dir` is given."""
    nodes = []
    for node in graph.nodes:
        if cloud_dir is None:
            cloud = {"points": node.cloud.points.tolist()}
        else:
            cloud_path = cloud_dir / f"{node.id}.sgpc"
            write_point_cloud(node.cloud.points, cloud_path)
            relative = cloud_path.relative_to(base_dir) if base_dir else cloud_path
            cloud = {"file": relative.as_posix(), "count": len(node.cloud)}
        entry = {
            "id": int(node.id),
            "category": int(node.category),
            "attributes": sorted(int(a) for a in node.attributes),
            "cloud": cloud,
        }
        if node.instance is not None:
            entry["instance"] = int(node.instance)
        nodes.append(entry)

    payload = {
        "scene_id": graph.scene_id,
        "vocabulary": graph.vocabulary.to_dict(),
        "nodes": nodes,
        "relationships": [
            {
                "subject": int(rel.subject),
                "object": int(rel.object),
                "predicate": int(rel.predicate),
                "geometric": bool(rel.geometric),
            }
            for rel in graph.relationships
        ],
    }
    if graph.pose is not None:
        payload["pose"] = graph.pose.matrix().reshape(-1).tolist()
    if graph.parent_id is not None:
        payload["parent_id"] = graph.parent_id
    return payload


def save_scene_graph(
    graph: SceneGraph, path: PathLike, binary_clouds: bool = False
) -> None:
    """
    Save a scene graph as UTF-8 JSON.

    Keys are sorted and floats use their shortest round-trip representation,
    so identical graphs produce identical bytes.

    Args:
        graph: Graph to save
        path: Destination JSON path
        binary_clouds: Write clouds to `<stem>/<node id>.sgpc` next to the
            JSON instead of inlining them (f32 precision)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cloud_dir = path.parent / path.stem if binary_clouds else None
    payload = graph_to_dict(graph, cloud_dir=cloud_dir, base_dir=path.parent)
    text = json.dumps(payload, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def graph_from_dict(
    payload: Dict, base_dir: Path, source: str = "<memory>"
) -> SceneGraph:
    """Validate a parsed JSON document and build the SceneGraph."""
    errors = sorted(
        _VALIDATOR.iter_errors(payload), key=lambda e: list(e.absolute_path)
    )
    if errors:
        first = errors[0]
        location = "/".join(str(part) for part in first.absolute_path) or "<root>"
        raise SceneGraphValidationError(
            f"{source}: schema violation at {location}: {first.message}"
        )

    try:
        vocabulary = Vocabulary(
            categories=tuple(payload["vocabulary"]["categories"]),
            predicates=tuple(payload["vocabulary"]["predicates"]),
            attributes=tuple(payload["vocabulary"]["attributes"]),
        )
        nodes = []
        for position, entry in enumerate(payload["nodes"]):
            cloud_spec = entry["cloud"]
            if "points" in cloud_spec:
                points = np.asarray(cloud_spec["points"], dtype=np.float64)
            else:
                points = read_point_cloud(base_dir / cloud_spec["file"])
                if points.shape[0] != cloud_spec["count"]:
                    raise SceneGraphValidationError(
                        f"node {entry['id']}: cloud file holds "
                        f"{points.shape[0]} points, "
                        f"count says {cloud_spec['count']}"
                    )
            nodes.append(
                ObjectNode(
                    id=entry["id"],
                    category=entry["category"],
                    attributes=frozenset(entry["attributes"]),
                    cloud=InstancePointCloud(points),
                    instance=entry.get("instance"),
                )
            )
        relationships = [
            Relationship(
                subject=entry["subject"],
                object=entry["object"],
                predicate=entry["predicate"],
                geometric=entry["geometric"],
            )
            for entry in payload["relationships"]
        ]
        pose = payload.get("pose")
        return SceneGraph(
            scene_id=payload["scene_id"],
            nodes=tuple(nodes),
            relationships=tuple(relationships),
            vocabulary=vocabulary,
            pose=(
                None
                if pose is None
                else RigidTransform.from_matrix(np.reshape(pose, (4, 4)))
            ),
            parent_id=payload.get("parent_id"),
        )
    except SceneGraphError as exc:
        raise type(exc)(f"{source}: {exc}") from exc
    except ValueError as exc:
        raise SceneGraphValidationError(f"{source}: {exc}") from exc


def load_scene_graph(path: PathLike) -> SceneGraph:
    """
    Load and validate a scene graph JSON file.

    Raises:
        SceneGraphParseError: file unreadable or not valid JSON
        SceneGraphValidationError: schema or invariant violation (message names
            the file and offending element)
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneGraphParseError(f"{path}: cannot read file ({exc})") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneGraphParseError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return graph_from_dict(payload, base_dir=path.parent, source=str(path))


def barycenter(cloud: Union[InstancePointCloud, np.ndarray]) -> np.ndarray:
    """
    Centroid of the convex-hull vertices of a cloud.

    Degenerate clouds (fewer than 4 points, collinear or coplanar) fall back
    to the arithmetic mean of all points.
    """
    if isinstance(cloud, InstancePointCloud):
        points = cloud.points
    else:
        points = np.asarray(cloud, dtype=np.float64)
    if points.shape[0] < 4:
        return points.mean(axis=0)
    try:
        hull = ConvexHull(points)
    except QhullError:
        return points.mean(axis=0)
    vertices = points[np.sort(hull.vertices)]
    return vertices.mean(axis=0)


def graph_barycenters(graph: SceneGraph) -> np.ndarray:
    """(n, 3) barycenters in node order."""
    if not graph.nodes:
        return np.zeros((0, 3))
    return np.stack([barycenter(node.cloud) for node in graph.nodes])


def restrict(
    graph: SceneGraph, keep_ids: Iterable[int], scene_id: Optional[str] = None
) -> SceneGraph:
    """Induced subgraph on `keep_ids` (node order preserved)."""
    keep = set(keep_ids)
    nodes = tuple(node for node in graph.nodes if node.id in keep)
    relationships = tuple(
        rel for rel in graph.relationships if rel.subject in keep and rel.object in keep
    )
    return replace(
        graph,
        scene_id=scene_id or graph.scene_id,
        nodes=nodes,
        relationships=relationships,
    )
