"""Tests for local descriptors, RANSAC registration and registration metrics."""
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.alignment import AlignmentResult, PairAlignment, rank_targets
from src.encoders import ModelParams
from src.geometry import RigidTransform
from src.registration import (
    DESCRIPTOR_SIZE,
    CorrespondenceSet,
    RansacConfig,
    RegistrationError,
    classification_metrics,
    estimate_normals,
    fmr,
    inlier_ratio,
    local_descriptors,
    node_correspondences,
    overlap_benchmark,
    register,
    register_alignment,
    register_graphs,
    registration_metrics,
)
from src.scenegraph import AnchorSet, InstancePointCloud, ObjectNode, SceneGraph
from tests.conftest import moved_copy


def ellipsoid(rng, n=200, axes=(1.0, 0.7, 0.5), center=(0.0, 0.0, 0.0)):
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * np.asarray(axes) + np.asarray(center)


def make_result(similarity, source_ids, target_ids):
    return AlignmentResult(
        source_ids=tuple(source_ids),
        target_ids=tuple(target_ids),
        similarity=similarity,
        order=rank_targets(similarity, target_ids),
    )


@pytest.fixture
def blob_graph(vocabulary):
    """Three ellipsoids of different shapes, spread over a room."""
    rng = np.random.default_rng(9)
    shapes = (
        ((0.5, 0.35, 0.25), (0.0, 0.0, 0.5)),
        ((0.3, 0.6, 0.4), (2.0, 0.5, 0.6)),
        ((0.4, 0.4, 0.8), (1.0, 2.5, 0.8)),
    )
    nodes = tuple(
        ObjectNode(
            id=slot + 1,
            category=slot,
            attributes=frozenset(),
            cloud=InstancePointCloud(ellipsoid(rng, axes=axes, center=center)),
        )
        for slot, (axes, center) in enumerate(shapes)
    )
    return SceneGraph("blobs", nodes, (), vocabulary)


@pytest.fixture
def blob_alignment(blob_graph):
    rng = np.random.default_rng(4)
    transform = RigidTransform.random(rng, translation_scale=2.0, yaw_only=True)
    target = moved_copy(blob_graph, transform)
    similarity = np.eye(3) * 0.9 + 0.05
    return PairAlignment(
        pair_id="blobs__blobs_moved",
        source=blob_graph,
        target=target,
        anchors=AnchorSet(((1, 101), (2, 102), (3, 103))),
        gt_transform=transform,
        result=make_result(similarity, blob_graph.node_ids, target.node_ids),
    )


def correspondence_set(source, target):
    return CorrespondenceSet(source, target, np.zeros(source.shape[0]))


def test_ransac_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(inlier_threshold=0.0)
    with pytest.raises(ValueError):
        RansacConfig(min_sample=4)
    with pytest.raises(ValueError):
        RansacConfig(confidence=1.0)


def test_normals_of_plane_are_vertical():
    rng = np.random.default_rng(0)
    plane = np.column_stack([rng.uniform(size=(60, 2)), np.zeros(60)])
    normals = estimate_normals(plane)
    np.testing.assert_allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)


def test_normals_of_ellipsoid_point_outward():
    points = ellipsoid(np.random.default_rng(1), n=300)
    normals = estimate_normals(points)
    assert np.all(np.einsum("ni,ni->n", normals, points - points.mean(axis=0)) >= 0)
    radial = points / np.linalg.norm(points, axis=1, keepdims=True)
    assert np.median(np.einsum("ni,ni->n", normals, radial)) > 0.8


def test_descriptors_are_normalized_histograms():
    cloud = InstancePointCloud(ellipsoid(np.random.default_rng(2)))
    descriptors = local_descriptors(cloud)
    assert descriptors.shape == (200, DESCRIPTOR_SIZE)
    assert np.all(descriptors >= 0)
    np.testing.assert_allclose(descriptors.sum(axis=1), 1.0)


def test_descriptors_rigid_invariant():
    """Rotating and translating the cloud leaves every descriptor unchanged."""
    rng = np.random.default_rng(3)
    points = ellipsoid(rng, n=150)
    transform = RigidTransform.random(rng, translation_scale=3.0)
    before = local_descriptors(InstancePointCloud(points))
    after = local_descriptors(InstancePointCloud(transform.apply(points)))
    np.testing.assert_allclose(after, before, atol=1e-8)


def test_duplicate_points_share_descriptors():
    points = ellipsoid(np.random.default_rng(4), n=40)
    doubled = np.vstack([points, points[:5]])
    descriptors = local_descriptors(InstancePointCloud(doubled))
    np.testing.assert_array_equal(descriptors[40:], descriptors[:5])


def test_descriptors_need_ten_distinct_points():
    points = ellipsoid(np.random.default_rng(5), n=9)
    with pytest.raises(RegistrationError):
        local_descriptors(InstancePointCloud(np.vstack([points, points])))


def test_correspondences_between_identical_clouds():
    cloud = InstancePointCloud(ellipsoid(np.random.default_rng(6), n=300))
    matches = node_correspondences(cloud, cloud, 1, 2)
    assert 0 < len(matches) <= 128
    np.testing.assert_array_equal(matches.source_points, matches.target_points)
    assert not matches.low_quality
    assert np.all(np.diff(matches.distances) >= 0)
    assert (matches.source_node, matches.target_node) == (1, 2)


def test_register_recovers_transform_with_outliers():
    rng = np.random.default_rng(7)
    truth = RigidTransform.random(rng, translation_scale=2.0)
    source = rng.uniform(-1.0, 1.0, size=(140, 3))
    target = truth.apply(source)
    offsets = rng.normal(size=(40, 3))
    unit = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    target[100:] += 0.5 * unit + offsets * 0.2

    result = register([correspondence_set(source, target)], RansacConfig(seed=1))
    assert result.transform.isclose(truth, atol=1e-6)
    assert result.n_inliers == 100
    assert result.n_correspondences == 140
    assert not result.inliers[100:].any()


def test_register_is_deterministic():
    rng = np.random.default_rng(8)
    truth = RigidTransform.random(rng)
    source = rng.uniform(-1.0, 1.0, size=(30, 3))
    target = truth.apply(source) + rng.normal(0.0, 0.02, size=source.shape)
    sets = [correspondence_set(source, target)]
    first = register(sets, RansacConfig(seed=3))
    second = register(sets, RansacConfig(seed=3))
    assert first.transform == second.transform
    assert first.iterations == second.iterations


def test_register_needs_three_correspondences():
    points = np.eye(3)[:2]
    with pytest.raises(RegistrationError):
        register([correspondence_set(points, points)], RansacConfig())


def test_register_all_samples_degenerate():
    line = np.column_stack([np.arange(6.0), np.zeros(6), np.zeros(6)])
    with pytest.raises(RegistrationError, match="degenerate"):
        register([correspondence_set(line, line)], RansacConfig(max_iterations=20))


def test_metrics_for_exact_estimate():
    rng = np.random.default_rng(10)
    gt = RigidTransform.random(rng, translation_scale=2.0)
    source = rng.normal(size=(50, 3))
    metrics = registration_metrics(gt, gt, source, gt.apply(source), source[:10])
    assert metrics["rre"] == pytest.approx(0.0, abs=1e-5)
    assert metrics["rte"] == 0.0
    assert metrics["rmse"] == 0.0
    assert metrics["chamfer"] == pytest.approx(0.0, abs=1e-20)
    assert metrics["recalled"]


def test_metrics_for_shifted_estimate():
    gt = RigidTransform.identity()
    shifted = RigidTransform(np.eye(3), np.array([0.3, 0.0, 0.0]))
    source = np.random.default_rng(11).normal(size=(20, 3))
    metrics = registration_metrics(shifted, gt, source, source, source)
    assert metrics["rte"] == pytest.approx(0.3)
    assert metrics["rmse"] == pytest.approx(0.3)
    assert not metrics["recalled"]


def nearest_sq(points, reference):
    return [min(float(np.sum((p - q) ** 2)) for q in reference) for p in points]


def test_metrics_match_pointwise_loops():
    rng = np.random.default_rng(13)
    for _ in range(50):
        gt = RigidTransform.random(rng, translation_scale=2.0)
        est = RigidTransform.random(rng, translation_scale=2.0)
        source = rng.normal(size=(int(rng.integers(5, 30)), 3))
        target = rng.normal(size=(int(rng.integers(5, 30)), 3))
        anchored = source[: int(rng.integers(1, len(source)))]
        metrics = registration_metrics(est, gt, source, target, anchored)

        relative = Rotation.from_matrix(est.rotation.T @ gt.rotation)
        assert metrics["rre"] == pytest.approx(
            np.degrees(relative.magnitude()), abs=1e-9
        )
        offset = est.translation - gt.translation
        assert metrics["rte"] == pytest.approx(math.sqrt(sum(offset**2)), abs=1e-9)

        moved = [est.rotation @ p + est.translation for p in source]
        chamfer = np.mean(nearest_sq(moved, target)) + np.mean(
            nearest_sq(target, moved)
        )
        assert metrics["chamfer"] == pytest.approx(chamfer, abs=1e-9)

        squared = [
            float(np.sum((est.rotation @ p + est.translation - gt.apply(p)) ** 2))
            for p in anchored
        ]
        assert metrics["rmse"] == pytest.approx(math.sqrt(np.mean(squared)), abs=1e-9)


def test_metrics_without_anchor_points():
    gt = RigidTransform.identity()
    source = np.random.default_rng(12).normal(size=(10, 3))
    metrics = registration_metrics(gt, gt, source, source, np.zeros((0, 3)))
    assert np.isnan(metrics["rmse"])
    assert not metrics["recalled"]


def test_inlier_ratio_and_fmr():
    source = np.zeros((4, 3))
    target = np.outer([0.0, 0.05, 0.5, 1.0], [1.0, 0.0, 0.0])
    identity = RigidTransform.identity()
    assert inlier_ratio([correspondence_set(source, target)], identity) == 0.5
    assert inlier_ratio([], RigidTransform.identity()) == 0.0
    assert fmr([0.01, 0.10, 0.06]) == pytest.approx(2 / 3)
    assert fmr([0.05]) == 0.0
    assert fmr([]) == 0.0


def test_classification_metrics_closed_form():
    labels = [True, True, False, False]
    metrics = classification_metrics(labels, [True, False, True, False])
    assert metrics == {"precision": 0.5, "recall": 0.5, "f1": 0.5}
    missed = classification_metrics([True], [False])
    assert missed == {"precision": 0.0, "recall": 0.0, "f1": 0.0}


def test_register_graphs_skips_non_overlapping(blob_alignment):
    source, target = blob_alignment.source, blob_alignment.target
    low = make_result(np.full((3, 3), 0.1), source.node_ids, target.node_ids)
    outcome = register_graphs(source, target, low, RansacConfig())
    assert outcome.decision == "non-overlap"
    assert outcome.result is None
    assert outcome.xi == 0.0


def test_register_alignment_recovers_ground_truth(blob_alignment):
    registration = register_alignment(blob_alignment, RansacConfig(seed=0))
    assert registration.decision == "overlap"
    assert registration.transform.isclose(blob_alignment.gt_transform, atol=1e-4)
    assert registration.metrics["recalled"]
    assert registration.inlier_ratio == pytest.approx(1.0)

    record = registration.as_dict()
    assert record["decision"] == "overlap"
    assert np.asarray(record["transform"]).shape == (4, 4)
    assert record["rre_deg"] < 0.01


def test_overlap_benchmark(vocabulary, blob_graph, room_graph):
    params = ModelParams.init(vocabulary, modalities=("S", "A"))
    items = [(blob_graph, blob_graph, True), (blob_graph, room_graph, False)]
    summary, rows = overlap_benchmark(params, items)
    assert summary["n"] == 2
    assert summary["mean_ms"] >= 0.0
    assert rows[0]["predicted"] is True
    assert rows[0]["xi"] == pytest.approx(1.0)
    assert {row["source"] for row in rows} == {"blobs"}
