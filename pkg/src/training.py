"""Contrastive training of the node encoders (intra-modal and inter-modal losses)."""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src import nn
from src.datagen import ScenePair
from src.encoders import (
    MASK_VALUE,
    MODALITIES,
    EmbeddingSet,
    ModelParams,
    embed_scene,
)
from src.nn import Tensor
from src.scenegraph import SceneGraph, Vocabulary

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Training inputs cannot produce a loss."""


@dataclass
class TrainConfig:
    """Optimization hyper-parameters."""

    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 0.001
    tau_icl: float = 0.1
    tau_ial: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    modalities: Tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.tau_icl <= 0 or self.tau_ial <= 0:
            raise TrainingError(
                f"temperatures must be positive, got {self.tau_icl} and {self.tau_ial}"
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError(
                f"invalid epochs={self.epochs} / batch_size={self.batch_size}"
            )
        if not self.modalities or set(self.modalities) - set(MODALITIES):
            raise TrainingError(f"invalid modalities {self.modalities}")


def anchor_rows(pair: ScenePair) -> np.ndarray:
    """(m, 2) row indices of the anchor pairs in source/target node order."""
    rows = [(pair.source.index_of(a), pair.target.index_of(b)) for a, b in pair.anchors]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


@dataclass
class PairEmbeddings:
    source: EmbeddingSet
    target: EmbeddingSet
    rows: np.ndarray


@dataclass
class ContrastiveBatch:
    """Embedded scene pairs with their anchor rows.

    For anchor (i, i') the negatives are every other source node (H1) and
    every target node except i' (H2); the reverse direction mirrors this.
    """

    pairs: List[PairEmbeddings] = field(default_factory=list)

    @classmethod
    def build(
        cls, params: ModelParams, pairs: Sequence[ScenePair]
    ) -> "ContrastiveBatch":
        embedded = []
        for pair in pairs:
            rows = anchor_rows(pair)
            if rows.shape[0] == 0:
                raise TrainingError(f"pair {pair.pair_id} has no anchors")
            source = embed_scene(params, pair.source)
            target = embed_scene(params, pair.target)
            embedded.append(PairEmbeddings(source, target, rows))
        return cls(embedded)


def similarity_logits(
    src: Tensor, dst: Tensor, rows: np.ndarray
) -> Tuple[Tensor, np.ndarray]:
    """
    Candidate similarities for anchors of `src`, one row per anchor.

    Columns are all `dst` nodes followed by all `src` nodes; the anchor's own
    column is masked out. Returns the logits and the positive column indices.
    """
    anchors = src[rows[:, 0]]
    cross = anchors @ nn.transpose(dst)
    same = anchors @ nn.transpose(src)
    mask = np.zeros(same.shape)
    mask[np.arange(rows.shape[0]), rows[:, 0]] = MASK_VALUE
    return nn.concat([cross, same + mask], axis=1), rows[:, 1]


def _icl_direction(src: Tensor, dst: Tensor, rows: np.ndarray, tau: float) -> Tensor:
    logits, labels = similarity_logits(src, dst, rows)
    log_probs = nn.log_softmax(logits, axis=1, temperature=tau)
    return -nn.reduce_mean(log_probs[np.arange(rows.shape[0]), labels])


def icl_loss(src: Tensor, dst: Tensor, rows: np.ndarray, tau: float) -> Tensor:
    """
    Bidirectional InfoNCE over anchors of one modality.

    Args:
        src: (n1, d) L2-normalized embeddings of the first graph
        dst: (n2, d) L2-normalized embeddings of the second graph
        rows: (m, 2) anchor row pairs
        tau: temperature

    Returns:
        Scalar loss, mean over anchors, averaged over both directions
    """
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    if rows.shape[0] == 0:
        raise TrainingError("contrastive loss needs at least one anchor pair")
    forward = _icl_direction(src, dst, rows, tau)
    reverse = _icl_direction(dst, src, rows[:, ::-1], tau)
    return (forward + reverse) * 0.5


def kl_divergence(target_logits, logits: Tensor, tau: float) -> Tensor:
    """Row-mean KL(softmax(target/tau) || softmax(logits/tau)), target held constant."""
    if isinstance(target_logits, Tensor):
        target_logits = target_logits.data
    target = np.asarray(target_logits, dtype=np.float64) / tau
    target = target - target.max(axis=1, keepdims=True)
    log_p = target - np.log(np.exp(target).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    entropy_term = np.where(p > 0, p * log_p, 0.0).sum(axis=1)
    log_q = nn.log_softmax(logits, axis=1, temperature=tau)
    cross = nn.reduce_sum(log_q * p, axis=1)
    return nn.reduce_mean(entropy_term - cross)


def ial_loss(
    uni_src: Tensor,
    uni_dst: Tensor,
    joint_src: Tensor,
    joint_dst: Tensor,
    rows: np.ndarray,
    tau: float,
) -> Tensor:
    """
    Symmetric KL between a uni-modal similarity distribution and the joint one.

    Per anchor direction the term is (KL(p || q) + KL(q' || p')) / 2 with p
    the joint and q the uni-modal distribution. KL(p || q) holds the joint side
    constant; the reversed KL holds both sides constant, so it adds to the
    value only. No gradient reaches the joint branch through this term.
    """
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    if rows.shape[0] == 0:
        raise TrainingError("alignment loss needs at least one anchor pair")
    terms = []
    directions = (
        (uni_src, uni_dst, joint_src, joint_dst, rows),
        (uni_dst, uni_src, joint_dst, joint_src, rows[:, ::-1]),
    )
    for a, b, ja, jb, r in directions:
        joint_logits, _ = similarity_logits(nn.detach(ja), nn.detach(jb), r)
        uni_logits, _ = similarity_logits(a, b, r)
        forward = kl_divergence(joint_logits, uni_logits, tau)
        reverse = kl_divergence(uni_logits.data, joint_logits, tau)
        terms.append((forward + reverse) * 0.5)
    return (terms[0] + terms[1]) * 0.5


def loss_weights(params: ModelParams) -> Tuple[Tensor, Tensor]:
    """softplus of the raw alpha/beta scalars for the active modalities."""
    index = params.modality_index()
    alpha = nn.softplus(params["loss.alpha"][index])
    beta = nn.softplus(params["loss.beta"][index])
    return alpha, beta


def total_loss(
    batch: ContrastiveBatch, params: ModelParams, tau_icl: float, tau_ial: float
) -> Tuple[Tensor, Dict[str, float]]:
    """
    Joint ICL plus weighted uni-modal ICL and IAL terms, averaged over pairs.

    Uni-modal ICL terms are weighted by alpha and IAL terms by beta.

    Returns:
        Scalar loss tensor and the batch-mean value of every component
    """
    if not batch.pairs:
        raise TrainingError("empty contrastive batch")
    alpha, beta = loss_weights(params)
    totals: Optional[Tensor] = None
    parts: Dict[str, float] = {}

    def note(key: str, value: Tensor) -> None:
        parts[key] = parts.get(key, 0.0) + value.item() / len(batch.pairs)

    for pair in batch.pairs:
        joint_src = nn.l2_normalize(pair.source.joint, axis=-1)
        joint_dst = nn.l2_normalize(pair.target.joint, axis=-1)
        icl_joint = icl_loss(joint_src, joint_dst, pair.rows, tau_icl)
        note("icl_joint", icl_joint)
        pair_loss = icl_joint
        for position, m in enumerate(params.modalities):
            uni_src, uni_dst = pair.source.uni[m], pair.target.uni[m]
            icl_m = icl_loss(uni_src, uni_dst, pair.rows, tau_icl)
            ial_m = ial_loss(uni_src, uni_dst, joint_src, joint_dst, pair.rows, tau_ial)
            note(f"icl_{m}", icl_m)
            note(f"ial_{m}", ial_m)
            pair_loss = pair_loss + alpha[position] * icl_m + beta[position] * ial_m
        totals = pair_loss if totals is None else totals + pair_loss
    loss = totals * (1.0 / len(batch.pairs))
    parts["total"] = loss.item()
    return loss, parts


@dataclass
class TrainResult:
    params: ModelParams
    history: pd.DataFrame


def history_columns(modalities: Sequence[str]) -> List[str]:
    columns = ["epoch", "mean_total", "mean_icl_joint"]
    columns += [f"mean_icl_{m}" for m in modalities]
    columns += [f"mean_ial_{m}" for m in modalities]
    columns += [f"alpha_{m}" for m in modalities]
    columns += [f"beta_{m}" for m in modalities]
    return columns


def train(
    pairs: Sequence[ScenePair],
    config: TrainConfig,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """
    Train all encoders end-to-end with AdamW.

    Pairs are shuffled per epoch with a generator seeded by `config.seed`;
    each step averages the loss over `batch_size` pairs.

    Args:
        pairs: Training scene pairs; pairs without anchors are skipped
        config: Training configuration
        params: Optional starting parameters (fresh initialization otherwise)

    Returns:
        TrainResult with the final parameters and one history row per epoch

    Raises:
        TrainingError: no pair has an anchor
    """
    usable = [pair for pair in pairs if len(pair.anchors) > 0]
    if len(usable) < len(pairs):
        logger.warning(f"skipping {len(pairs) - len(usable)} pair(s) without anchors")
    if not usable:
        raise TrainingError("no trainable pairs (every pair lacks anchors)")
    if params is None:
        params = ModelParams.init(
            usable[0].source.vocabulary,
            seed=config.seed,
            modalities=config.modalities,
        )

    state = nn.OptimizerState(
        learning_rate=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        sums: Dict[str, float] = {}
        for start in range(0, len(order), config.batch_size):
            members = [usable[i] for i in order[start : start + config.batch_size]]
            with nn.Tape() as tape:
                batch = ContrastiveBatch.build(params, members)
                loss, parts = total_loss(batch, params, config.tau_icl, config.tau_ial)
            nn.backward(tape, loss)
            nn.opt_step(state, params.trainable())
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value * len(members)

        alpha, beta = loss_weights(params)
        row = {"epoch": epoch + 1}
        row.update({f"mean_{key}": value / len(usable) for key, value in sums.items()})
        for m, a, b in zip(params.modalities, alpha.data, beta.data):
            row[f"alpha_{m}"] = float(a)
            row[f"beta_{m}"] = float(b)
        rows.append(row)
        logger.info(
            f"epoch {epoch + 1}/{config.epochs}: mean loss {row['mean_total']:.4f}"
        )

    history = pd.DataFrame(rows, columns=history_columns(params.modalities))
    return TrainResult(params=params, history=history)


def sidecar_path(checkpoint: Path) -> Path:
    return Path(checkpoint).with_suffix(".json")


def save_model(params: ModelParams, checkpoint: Path, config: TrainConfig) -> None:
    """Write the SGNN checkpoint plus a JSON sidecar with config and vocabulary."""
    nn.save_checkpoint(checkpoint, params.arrays(), ",".join(params.modalities))
    sidecar = {
        "train_config": asdict(config),
        "vocabulary": params.vocabulary.to_dict(),
        "modalities": list(params.modalities),
    }
    text = json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    sidecar_path(checkpoint).write_text(text, encoding="utf-8")


def load_model(checkpoint: Path) -> ModelParams:
    arrays, order = nn.load_checkpoint(checkpoint)
    try:
        sidecar = json.loads(sidecar_path(checkpoint).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TrainingError(
            f"{sidecar_path(checkpoint)}: cannot read checkpoint sidecar ({exc})"
        ) from exc
    vocabulary = Vocabulary(**sidecar["vocabulary"])
    modalities = tuple(m for m in order.split(",") if m)
    return ModelParams.from_arrays(arrays, vocabulary, modalities=modalities)


def embed_graphs(
    params: ModelParams, graphs: Sequence[SceneGraph]
) -> List[EmbeddingSet]:
    """Inference-only embedding (no tape is active, nothing is recorded)."""
    return [embed_scene(params, graph) for graph in graphs]
