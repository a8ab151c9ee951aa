"""
Uni-modal node encoders and the weighted joint embedding.

Modalities are P (object point cloud), S (neighbourhood structure via a
two-layer diagonal GAT), R (relationship multi-hot) and A (attribute
multi-hot). The joint embedding concatenates the L2-normalized uni-modal
vectors scaled by softmax(w) over the active modalities, in P, S, R, A order.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src import nn
from src.nn import ShapeError, Tensor
from src.scenegraph import (
    InstancePointCloud,
    ObjectNode,
    SceneGraph,
    Vocabulary,
    graph_barycenters,
)

logger = logging.getLogger(__name__)

MODALITIES: Tuple[str, ...] = ("P", "S", "R", "A")
POINTS_PER_OBJECT = 512
POINT_WIDTHS = (3, 64, 128, 256)
GAT_HIDDEN = 128
GAT_LAYERS = 2
EMBED_DIM = 100
ATTENTION_SLOPE = 0.2
MASK_VALUE = -1e9
LOSS_WEIGHT_INIT = float(np.log(np.e - 1.0))  # softplus(x) == 1

EMBEDDING_MAGIC = b"SGEM"


def parse_modalities(text: str) -> Tuple[str, ...]:
    """'P,S' / 'PS' / 'P+S' -> ('P', 'S') in canonical order."""
    letters = text.replace(",", "").replace("+", "").upper()
    chosen = {part for part in letters if part.strip()}
    unknown = chosen - set(MODALITIES)
    if unknown or not chosen:
        raise ValueError(
            f"invalid modalities {text!r}; use a subset of {','.join(MODALITIES)}"
        )
    return tuple(m for m in MODALITIES if m in chosen)


def _glorot(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape=None
) -> np.ndarray:
    if shape is None:
        shape = (fan_in, fan_out)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ModelParams:
    """Named trainable tensors of the full model."""

    def __init__(
        self,
        tensors: Dict[str, Tensor],
        vocabulary: Vocabulary,
        modalities: Sequence[str] = MODALITIES,
    ):
        self.tensors = tensors
        self.vocabulary = vocabulary
        self.modalities = tuple(m for m in MODALITIES if m in set(modalities))
        if not self.modalities:
            raise ValueError("at least one modality must be active")

    @classmethod
    def init(
        cls,
        vocabulary: Vocabulary,
        seed: int = 0,
        modalities: Sequence[str] = MODALITIES,
    ) -> "ModelParams":
        """Glorot-uniform weights, zero biases, unit GAT diagonals and loss weights."""
        rng = np.random.default_rng(seed)
        arrays: Dict[str, np.ndarray] = {}
        widths = zip(POINT_WIDTHS[:-1], POINT_WIDTHS[1:])
        for layer, (fan_in, fan_out) in enumerate(widths):
            arrays[f"point.w{layer}"] = _glorot(rng, fan_in, fan_out)
            arrays[f"point.b{layer}"] = np.zeros(fan_out)
        arrays["point.proj_w"] = _glorot(rng, POINT_WIDTHS[-1], EMBED_DIM)
        arrays["point.proj_b"] = np.zeros(EMBED_DIM)
        arrays["struct.in_w"] = _glorot(rng, 3, GAT_HIDDEN)
        arrays["struct.in_b"] = np.zeros(GAT_HIDDEN)
        for layer in range(GAT_LAYERS):
            arrays[f"struct.gat{layer}.diag"] = np.ones(GAT_HIDDEN)
            arrays[f"struct.gat{layer}.attn"] = _glorot(
                rng, 2 * GAT_HIDDEN, 1, (2 * GAT_HIDDEN,)
            )
        arrays["struct.out_w"] = _glorot(rng, GAT_HIDDEN, EMBED_DIM)
        arrays["struct.out_b"] = np.zeros(EMBED_DIM)
        n_predicates = len(vocabulary.predicates)
        n_attributes = len(vocabulary.attributes)
        arrays["rel.w"] = _glorot(rng, n_predicates, EMBED_DIM)
        arrays["rel.b"] = np.zeros(EMBED_DIM)
        arrays["attr.w"] = _glorot(rng, n_attributes, EMBED_DIM)
        arrays["attr.b"] = np.zeros(EMBED_DIM)
        arrays["modality.w"] = np.zeros(len(MODALITIES))
        arrays["loss.alpha"] = np.full(len(MODALITIES), LOSS_WEIGHT_INIT)
        arrays["loss.beta"] = np.full(len(MODALITIES), LOSS_WEIGHT_INIT)
        return cls.from_arrays(arrays, vocabulary, modalities)

    @classmethod
    def from_arrays(
        cls,
        arrays: Dict[str, np.ndarray],
        vocabulary: Vocabulary,
        modalities: Sequence[str] = MODALITIES,
    ) -> "ModelParams":
        tensors = {
            name: Tensor(value, requires_grad=True, name=name)
            for name, value in arrays.items()
        }
        return cls(tensors, vocabulary, modalities)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.tensors.items()}

    def modality_index(self) -> np.ndarray:
        return np.array([MODALITIES.index(m) for m in self.modalities], dtype=np.int64)

    def trainable(self) -> List[Tensor]:
        """Tensors reached by a forward pass over the active modalities."""
        prefixes = {"P": "point.", "S": "struct.", "R": "rel.", "A": "attr."}
        active = tuple(prefixes[m] for m in self.modalities)
        return [
            tensor
            for name, tensor in self.tensors.items()
            if name.startswith(active) or name.startswith(("modality.", "loss."))
        ]

    def modality_weights(self) -> Dict[str, float]:
        """softmax(w) over the active modalities, as plain floats."""
        raw = self.tensors["modality.w"].data[self.modality_index()].astype(np.float64)
        weights = np.exp(raw - raw.max())
        weights /= weights.sum()
        return dict(zip(self.modalities, weights.tolist()))


# --- object (point cloud) encoder ----------------------------------------------


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center, scale to unit max radius and put points in lexicographic order."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    order = np.lexsort((centered[:, 2], centered[:, 1], centered[:, 0]))
    return centered[order]


def encode_objects(params: ModelParams, clouds: Sequence[InstancePointCloud]) -> Tensor:
    """Shared per-point MLP, channel max-pool and projection for a batch of clouds."""
    for cloud in clouds:
        if len(cloud) != POINTS_PER_OBJECT:
            raise ShapeError(
                f"object encoder needs {POINTS_PER_OBJECT} points per cloud, "
                f"got {len(cloud)}"
            )
    batch = np.concatenate([normalize_cloud(cloud.points) for cloud in clouds], axis=0)
    h = Tensor(batch)
    for layer in range(len(POINT_WIDTHS) - 1):
        h = nn.relu(h @ params[f"point.w{layer}"] + params[f"point.b{layer}"])
    h = nn.reshape(h, (len(clouds), POINTS_PER_OBJECT, POINT_WIDTHS[-1]))
    pooled = nn.reduce_max(h, axis=1)
    return pooled @ params["point.proj_w"] + params["point.proj_b"]


def encode_object(params: ModelParams, cloud: InstancePointCloud) -> Tensor:
    """100-d visual embedding of one object cloud."""
    return nn.reshape(encode_objects(params, [cloud]), (EMBED_DIM,))


# --- structure encoder ---------------------------------------------------------


@dataclass(frozen=True)
class StructureGraph:
    """Relative-translation node features and symmetric adjacency with self-loops."""

    node_ids: Tuple[int, ...]
    hub: int
    node_features: np.ndarray
    edges: Tuple[Tuple[int, int], ...]

    def adjacency(self) -> np.ndarray:
        n = len(self.node_ids)
        mask = np.zeros((n, n), dtype=bool)
        for i, j in self.edges:
            mask[i, j] = True
        return mask


def build_structure_graph(graph: SceneGraph) -> StructureGraph:
    """
    Hub = node with most relationships (ties -> lowest id); features are
    barycenter offsets from the hub.
    """
    if not graph.nodes:
        raise ValueError(
            f"{graph.scene_id}: cannot build a structure graph without nodes"
        )
    hub = min(graph.node_ids, key=lambda node_id: (-graph.degree(node_id), node_id))
    centers = graph_barycenters(graph)
    features = centers - centers[graph.index_of(hub)]
    edges = {(i, i) for i in range(len(graph.nodes))}
    for rel in graph.relationships:
        i, j = graph.index_of(rel.subject), graph.index_of(rel.object)
        edges.add((i, j))
        edges.add((j, i))
    return StructureGraph(
        node_ids=tuple(graph.node_ids),
        hub=hub,
        node_features=features,
        edges=tuple(sorted(edges)),
    )


def gat_layer(
    h: Tensor, diag: Tensor, attn: Tensor, mask: np.ndarray
) -> Tuple[Tensor, Tensor]:
    """
    One single-head attention layer with a diagonal weight matrix.

    Returns the new node states elu(A @ (h * diag)) and the attention matrix A,
    whose rows are softmax-normalized over each node's neighbourhood.
    """
    z = h * diag
    width = z.shape[1]
    source_score = z @ nn.reshape(attn[:width], (width, 1))
    target_score = z @ nn.reshape(attn[width:], (width, 1))
    logits = nn.leaky_relu(source_score + nn.transpose(target_score), ATTENTION_SLOPE)
    bias = np.where(mask, 0.0, MASK_VALUE)
    weights = nn.softmax(logits + bias, axis=1)
    return nn.elu(weights @ z), weights


def encode_structure(params: ModelParams, sg: StructureGraph) -> Tensor:
    """Per-node 100-d neighbourhood embeddings, shape (n, 100)."""
    mask = sg.adjacency()
    h = Tensor(sg.node_features) @ params["struct.in_w"] + params["struct.in_b"]
    for layer in range(GAT_LAYERS):
        diag = params[f"struct.gat{layer}.diag"]
        attn = params[f"struct.gat{layer}.attn"]
        h, _ = gat_layer(h, diag, attn, mask)
    return h @ params["struct.out_w"] + params["struct.out_b"]


# --- relationship / attribute encoders -----------------------------------------


def relationship_inputs(graph: SceneGraph) -> np.ndarray:
    """
    Multi-hot (n, |predicates|) node inputs.

    A cell is 1 when the node is subject or object of an edge with that predicate.
    """
    inputs = np.zeros((len(graph.nodes), len(graph.vocabulary.predicates)))
    for rel in graph.relationships:
        inputs[graph.index_of(rel.subject), rel.predicate] = 1.0
        inputs[graph.index_of(rel.object), rel.predicate] = 1.0
    return inputs


def attribute_inputs(nodes: Sequence[ObjectNode], attribute_count: int) -> np.ndarray:
    inputs = np.zeros((len(nodes), attribute_count))
    for row, node in enumerate(nodes):
        for attribute in node.attributes:
            inputs[row, attribute] = 1.0
    return inputs


def encode_all_relationships(params: ModelParams, graph: SceneGraph) -> Tensor:
    return Tensor(relationship_inputs(graph)) @ params["rel.w"] + params["rel.b"]


def encode_relationships(
    params: ModelParams, graph: SceneGraph, node_id: int
) -> Tensor:
    """Single linear layer over the node's predicate multi-hot vector."""
    row = relationship_inputs(graph)[graph.index_of(node_id)]
    projected = Tensor(row[None, :]) @ params["rel.w"]
    return nn.reshape(projected, (EMBED_DIM,)) + params["rel.b"]


def encode_all_attributes(params: ModelParams, nodes: Sequence[ObjectNode]) -> Tensor:
    inputs = attribute_inputs(nodes, params["attr.w"].shape[0])
    return Tensor(inputs) @ params["attr.w"] + params["attr.b"]


def encode_attributes(params: ModelParams, node: ObjectNode) -> Tensor:
    return nn.reshape(encode_all_attributes(params, [node]), (EMBED_DIM,))


# --- joint embedding -------------------------------------------------------------


def joint_embedding(params: ModelParams, uni: Dict[str, Tensor]) -> Tensor:
    """
    Concatenate L2-normalized uni-modal embeddings scaled by softmax(w).

    Accepts (100,) vectors or (n, 100) matrices; only the active modalities
    are used and they must all be present in `uni`.
    """
    missing = [m for m in params.modalities if m not in uni]
    if missing:
        raise ValueError(f"joint embedding is missing modalities {missing}")
    weights = nn.softmax(params["modality.w"][params.modality_index()])
    blocks = [
        nn.l2_normalize(uni[m], axis=-1) * weights[position]
        for position, m in enumerate(params.modalities)
    ]
    return nn.concat(blocks, axis=-1)


@dataclass
class EmbeddingSet:
    """Per-node unit uni-modal embeddings and the joint embedding of one graph."""

    scene_id: str
    node_ids: Tuple[int, ...]
    uni: Dict[str, Tensor]
    joint: Tensor

    def __len__(self) -> int:
        return len(self.node_ids)

    def joint_array(self) -> np.ndarray:
        return self.joint.data.astype(np.float64)

    def row(self, node_id: int) -> int:
        return self.node_ids.index(node_id)


def embed_scene(params: ModelParams, graph: SceneGraph) -> EmbeddingSet:
    """Run every active encoder and the joint embedding over all nodes of `graph`."""
    raw: Dict[str, Tensor] = {}
    if "P" in params.modalities:
        raw["P"] = encode_objects(params, [node.cloud for node in graph.nodes])
    if "S" in params.modalities:
        raw["S"] = encode_structure(params, build_structure_graph(graph))
    if "R" in params.modalities:
        raw["R"] = encode_all_relationships(params, graph)
    if "A" in params.modalities:
        raw["A"] = encode_all_attributes(params, graph.nodes)
    uni = {m: nn.l2_normalize(value, axis=-1) for m, value in raw.items()}
    return EmbeddingSet(
        scene_id=graph.scene_id,
        node_ids=tuple(graph.node_ids),
        uni=uni,
        joint=joint_embedding(params, uni),
    )


# --- embedding dump ----------------------------------------------------------------


def save_embeddings(embeddings: EmbeddingSet, path: Path) -> None:
    """
    Write an SGEM file: magic, scene id, modality order, node count, then per
    node the id (i64), each uni-modal block and the joint vector (f32).
    """
    modalities = tuple(m for m in MODALITIES if m in embeddings.uni)
    scene_bytes = embeddings.scene_id.encode("utf-8")
    order_bytes = ",".join(modalities).encode("utf-8")
    chunks = [
        EMBEDDING_MAGIC,
        struct.pack("<I", len(scene_bytes)),
        scene_bytes,
        struct.pack("<I", len(order_bytes)),
        order_bytes,
        struct.pack("<I", len(embeddings)),
    ]
    for row, node_id in enumerate(embeddings.node_ids):
        chunks.append(struct.pack("<q", node_id))
        for m in modalities:
            values = embeddings.uni[m].data[row]
            chunks.append(np.asarray(values, dtype="<f4").tobytes())
        chunks.append(np.asarray(embeddings.joint.data[row], dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_embeddings(path: Path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    if blob[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not an SGEM embedding file")
    offset = 4

    def take_bytes(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise ValueError(f"{path}: truncated at byte {offset}")
        chunk = blob[offset : offset + size]
        offset += size
        return chunk

    scene_id = take_bytes(struct.unpack("<I", take_bytes(4))[0]).decode("utf-8")
    order = take_bytes(struct.unpack("<I", take_bytes(4))[0]).decode("utf-8")
    modalities = tuple(m for m in order.split(",") if m)
    count = struct.unpack("<I", take_bytes(4))[0]
    ids: List[int] = []
    uni_rows: Dict[str, List[np.ndarray]] = {m: [] for m in modalities}
    joint_rows: List[np.ndarray] = []
    joint_width = EMBED_DIM * len(modalities)
    for _ in range(count):
        ids.append(struct.unpack("<q", take_bytes(8))[0])
        for m in modalities:
            uni_rows[m].append(np.frombuffer(take_bytes(4 * EMBED_DIM), dtype="<f4"))
        joint_rows.append(np.frombuffer(take_bytes(4 * joint_width), dtype="<f4"))

    def stack(rows: List[np.ndarray], width: int) -> Tensor:
        return Tensor(np.stack(rows) if rows else np.zeros((0, width)))

    return EmbeddingSet(
        scene_id=scene_id,
        node_ids=tuple(ids),
        uni={m: stack(uni_rows[m], EMBED_DIM) for m in modalities},
        joint=stack(joint_rows, joint_width),
    )

