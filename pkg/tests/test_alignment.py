"""Tests for node matching, alignment metrics and the overlap score."""
import numpy as np
import pytest

from src.alignment import (
    AlignmentError,
    AlignmentResult,
    PairAlignment,
    align_pair,
    alignment_report,
    confusion_matrix,
    cosine_matrix,
    evaluate_alignments,
    hits_at_k,
    hits_from_ranks,
    igar,
    match_nodes,
    mrr,
    mrr_from_ranks,
    overlap_score,
    pair_aligned,
    rank_targets,
    self_aligned_count,
    sgar,
)
from src.datagen import ScenePair
from src.encoders import EmbeddingSet, ModelParams
from src.geometry import RigidTransform
from src.nn import Tensor
from src.scenegraph import AnchorSet, restrict
from tests.conftest import moved_copy


def make_result(similarity, source_ids, target_ids, sim_threshold=0.5):
    similarity = np.asarray(similarity, dtype=np.float64)
    return AlignmentResult(
        source_ids=tuple(source_ids),
        target_ids=tuple(target_ids),
        similarity=similarity,
        order=rank_targets(similarity, target_ids),
        sim_threshold=sim_threshold,
    )


def embeddings(scene_id, node_ids, vectors):
    joint = Tensor(np.asarray(vectors, dtype=np.float64))
    return EmbeddingSet(scene_id, tuple(node_ids), {}, joint)


@pytest.fixture
def moved_pair(room_graph):
    rng = np.random.default_rng(8)
    transform = RigidTransform.random(rng, translation_scale=2.0, yaw_only=True)
    target = moved_copy(room_graph, transform)
    anchors = AnchorSet(tuple((i, i + 100) for i in room_graph.node_ids))
    return room_graph, target, anchors, transform


def alignment_for(moved_pair, similarity):
    source, target, anchors, transform = moved_pair
    return PairAlignment(
        pair_id="room__room_moved",
        source=source,
        target=target,
        anchors=anchors,
        gt_transform=transform,
        result=make_result(similarity, source.node_ids, target.node_ids),
    )


def test_cosine_matrix_zero_rows():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[2.0, 0.0], [1.0, 1.0]])
    sims = cosine_matrix(a, b)
    np.testing.assert_allclose(sims, [[1.0, np.sqrt(0.5)], [0.0, 0.0]])


def test_rank_ties_go_to_lower_target_id():
    result = make_result([[0.5, 0.9, 0.9]], [1], [30, 20, 10])
    assert [target for target, _ in result.ranking(1)] == [10, 20, 30]
    assert result.top1(1) == (10, 0.9)
    assert result.rank_of(1, 30) == 3


def test_matched_pairs_top_k():
    result = make_result([[0.1, 0.8], [0.7, 0.2]], [1, 2], [5, 6])
    assert result.matched_pairs(1) == [(1, 6, 0.8), (2, 5, 0.7)]
    assert len(result.matched_pairs(2)) == 4


def test_unknown_nodes_raise():
    result = make_result([[0.1, 0.8]], [1], [5, 6])
    with pytest.raises(AlignmentError):
        result.rank_of(1, 99)
    with pytest.raises(AlignmentError):
        result.top1(2)


def test_mrr_and_hits_closed_form():
    ranks = np.array([1, 2, 4])
    assert mrr_from_ranks(ranks) == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert hits_from_ranks(ranks, 1) == pytest.approx(1 / 3)
    assert hits_from_ranks(ranks, 2) == pytest.approx(2 / 3)
    assert hits_from_ranks(ranks, 5) == 1.0
    assert mrr_from_ranks(np.zeros(0)) == 0.0
    with pytest.raises(ValueError):
        hits_from_ranks(ranks, 0)


def test_mrr_from_result():
    result = make_result([[0.9, 0.1], [0.8, 0.3]], [1, 2], [5, 6])
    anchors = AnchorSet(((1, 5), (2, 6)))
    assert mrr(result, anchors) == pytest.approx(0.75)
    assert hits_at_k(result, anchors, 1) == pytest.approx(0.5)


def test_match_nodes_uses_joint_cosine():
    src = embeddings("a", [1, 2], [[1.0, 0.0], [0.0, 2.0]])
    dst = embeddings("b", [7, 8], [[0.0, 1.0], [3.0, 0.0]])
    result = match_nodes(src, dst)
    assert result.top1(1) == (8, 1.0)
    assert result.top1(2) == (7, 1.0)


def test_overlap_score():
    result = make_result([[0.9, 0.1], [0.3, 0.2], [0.4, 0.6]], [1, 2, 3], [5, 6])
    xi, overlapping = overlap_score(result, sim_threshold=0.5, threshold=0.2)
    assert xi == pytest.approx(1.0)
    assert overlapping

    xi, overlapping = overlap_score(result, sim_threshold=0.95)
    assert xi == 0.0
    assert not overlapping


def test_sgar_perfect_and_wrong_matches(moved_pair):
    """Correct matches fit the ground truth; a cyclic shift of them does not."""
    correct = alignment_for(moved_pair, np.eye(4) * 0.9 + 0.05)
    shifted = alignment_for(moved_pair, np.roll(np.eye(4), 1, axis=1) * 0.9 + 0.05)
    for strategy in ("top2", "top50pct", "all"):
        assert pair_aligned(correct, strategy)
        assert not pair_aligned(shifted, strategy)
    assert sgar([correct, shifted], "all") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        sgar([correct], "top3")


def test_self_aligned_count():
    src = embeddings("a", [1, 2], [[1.0, 0.0], [0.99, 0.14]])
    dst = embeddings("b", [5, 6], [[0.0, 1.0], [0.5, -1.0]])
    anchors = AnchorSet(((1, 5), (2, 6)))
    assert self_aligned_count(src, dst, anchors) == 2
    assert self_aligned_count(src, dst, anchors, include_same_graph=False) == 0


def self_aligned_by_loop(src, dst, anchors):
    """Scan every candidate; ties go to the lower id, then the cross-graph side."""
    vectors = {}
    for side, emb in ((1, dst), (2, src)):
        for node_id, vector in zip(emb.node_ids, emb.joint_array()):
            vectors[side, node_id] = vector / np.linalg.norm(vector)
    count = 0
    for source_id, _ in anchors:
        query = vectors[2, source_id]
        best = None
        for (side, node_id), vector in vectors.items():
            if (side, node_id) == (2, source_id):
                continue
            key = (-min(max(float(query @ vector), -1.0), 1.0), node_id, side)
            if best is None or key < best:
                best = key
        count += int(best[2] == 2)
    return count


def test_igar_matches_candidate_scan(moved_pair):
    source, target, _, _ = moved_pair
    rng = np.random.default_rng(14)
    for case in range(50):
        alignments, ratios = [], []
        for _ in range(int(rng.integers(1, 4))):
            alignment = alignment_for(moved_pair, rng.uniform(size=(4, 4)))
            if case == 0:
                # identical embeddings: every tie resolves by node id
                src_vectors = dst_vectors = np.tile([1.0, 0.0, 0.0], (4, 1))
            else:
                src_vectors, dst_vectors = rng.normal(size=(2, 4, 3))
            src = embeddings("a", source.node_ids, src_vectors)
            dst = embeddings("b", target.node_ids, dst_vectors)
            keep = rng.random(4) < 0.6
            anchors = AnchorSet(
                tuple((i, i + 100) for i, kept in zip(source.node_ids, keep) if kept)
            )
            alignment.anchors = anchors
            alignment.source_embeddings, alignment.target_embeddings = src, dst
            alignments.append(alignment)
            if len(anchors):
                ratios.append(self_aligned_by_loop(src, dst, anchors) / len(anchors))
        expected = float(np.mean(ratios)) if ratios else 0.0
        assert igar(alignments) == expected


def test_igar_needs_embeddings(moved_pair):
    with pytest.raises(AlignmentError):
        igar([alignment_for(moved_pair, np.eye(4))])


def test_confusion_matrix_counts(moved_pair):
    source = moved_pair[0]
    # every source node matches target node 101, whose category is table
    alignment = alignment_for(moved_pair, np.tile([0.9, 0.1, 0.1, 0.1], (4, 1)))
    frame = confusion_matrix([alignment])
    categories = list(source.vocabulary.categories)
    assert list(frame.columns) == categories
    assert frame["table"].sum() == 4
    assert frame.loc["chair", "table"] == 1
    assert frame.values.sum() == 4
    assert confusion_matrix([]).empty


def test_evaluate_alignments_flat_keys(moved_pair):
    source, target, anchors, _ = moved_pair
    alignment = alignment_for(moved_pair, np.eye(4) * 0.9 + 0.05)
    vectors = np.eye(4)
    alignment.source_embeddings = embeddings("a", source.node_ids, vectors)
    alignment.target_embeddings = embeddings("b", target.node_ids, vectors)

    metrics = evaluate_alignments([alignment])
    flat = metrics.as_dict()
    assert flat["mrr"] == 1.0
    assert flat["hits@1"] == 1.0
    assert flat["sgar_top2"] == 1.0
    assert flat["igar"] == 0.0
    assert flat["n_anchors"] == 4
    assert set(flat) >= {f"hits@{k}" for k in range(1, 6)}


def test_alignment_report(moved_pair):
    report = alignment_report(alignment_for(moved_pair, np.eye(4) * 0.9 + 0.05), k=2)
    assert report["pair_id"] == "room__room_moved"
    assert len(report["matches"]) == 8
    assert report["matches"][0] == {"src": 1, "dst": 101, "sim": 0.95}
    assert report["metrics"]["overlapping"] is True


def test_align_pair_drops_anchors_of_missing_nodes(vocabulary, moved_pair):
    source, target, anchors, transform = moved_pair
    pair = ScenePair(
        "room__room_moved", source, target, anchors, transform, overlap=1.0
    )
    params = ModelParams.init(vocabulary, modalities=("S", "R", "A"))

    alignment = align_pair(params, pair, source=restrict(source, [1, 2, 3]))
    assert alignment.anchors.as_dict() == {1: 101, 2: 102, 3: 103}
    assert alignment.result.similarity.shape == (3, 4)
    assert alignment.source_embeddings is not None
