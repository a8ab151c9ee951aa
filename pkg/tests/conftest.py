"""Shared fixtures: a small generated benchmark and hand-built graphs."""
import logging

import numpy as np
import pytest

from src.datagen import GenConfig, generate_dataset, write_dataset
from src.scenegraph import (
    InstancePointCloud,
    ObjectNode,
    Relationship,
    SceneGraph,
    Vocabulary,
)


def tiny_config(**overrides) -> GenConfig:
    """Few objects, wide camera sweeps, full-size object clouds."""
    values = dict(
        seed=11,
        num_scenes=2,
        objects_per_scene=(5, 7),
        points_per_object_raw=(200, 400),
        target_points=512,
        subscenes_per_scene=3,
        overlap_range=(0.05, 1.0),
        view_extent=(4.0, 5.0),
        min_visible_points=16,
    )
    values.update(overrides)
    return GenConfig(**values)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_config())


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_dataset):
    data_dir = tmp_path_factory.mktemp("dataset")
    write_dataset(tiny_dataset, data_dir)
    return data_dir


@pytest.fixture
def restore_root_logger():
    """Undo configure_logging side effects on the root logger."""
    root = logging.getLogger()
    level, handlers = root.level, list(root.handlers)
    yield root
    root.handlers = handlers
    root.setLevel(level)


@pytest.fixture
def vocabulary():
    return Vocabulary(
        categories=("chair", "table", "lamp", "shelf"),
        predicates=("standing on", "attached to", "left", "right", "same category"),
        attributes=("wooden", "white", "small", "tall"),
    )


def box_cloud(rng, center, size, n=512):
    """Points on the surface of an axis-aligned box."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    points = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    points[np.arange(n), axis] = np.where(rng.random(n) < 0.5, -0.5, 0.5)
    return center + points * size


@pytest.fixture
def room_graph(vocabulary):
    """Four boxes with a small relationship chain; node 1 is the hub."""
    rng = np.random.default_rng(5)
    layout = (
        (1, 1, (2.0, 2.0, 0.4), (1.2, 0.8, 0.8)),
        (2, 0, (1.0, 2.0, 0.45), (0.5, 0.5, 0.9)),
        (3, 2, (2.0, 2.0, 1.0), (0.2, 0.2, 0.4)),
        (4, 3, (4.0, 1.0, 1.0), (0.4, 1.5, 2.0)),
    )
    nodes = tuple(
        ObjectNode(
            id=node_id,
            category=category,
            attributes=frozenset({node_id % 4}),
            cloud=InstancePointCloud(box_cloud(rng, center, size)),
        )
        for node_id, category, center, size in layout
    )
    relationships = (
        Relationship(3, 1, 0, geometric=True),
        Relationship(2, 1, 2, geometric=True),
        Relationship(1, 4, 3, geometric=True),
    )
    return SceneGraph("room", nodes, relationships, vocabulary)


def moved_copy(graph, transform, id_offset=100):
    """Same objects under `transform` with renumbered ids."""
    nodes = tuple(
        ObjectNode(
            id=node.id + id_offset,
            category=node.category,
            attributes=node.attributes,
            cloud=node.cloud.transformed(transform),
            instance=node.instance_id,
        )
        for node in graph.nodes
    )
    relationships = tuple(
        Relationship(
            rel.subject + id_offset,
            rel.object + id_offset,
            rel.predicate,
            rel.geometric,
        )
        for rel in graph.relationships
    )
    return graph.with_changes(
        scene_id=f"{graph.scene_id}_moved", nodes=nodes, relationships=relationships
    )
