"""Tests for the uni-modal encoders and the joint embedding."""
import numpy as np
import pytest

from src import nn
from src.encoders import (
    EMBED_DIM,
    ModelParams,
    attribute_inputs,
    build_structure_graph,
    embed_scene,
    encode_object,
    encode_objects,
    encode_structure,
    gat_layer,
    load_embeddings,
    normalize_cloud,
    parse_modalities,
    relationship_inputs,
    save_embeddings,
)
from src.nn import ShapeError, Tape, Tensor
from src.scenegraph import InstancePointCloud


@pytest.fixture
def params(vocabulary):
    return ModelParams.init(vocabulary, seed=0)


@pytest.mark.parametrize("text", ["P,S", "PS", "P+S", "s,p", "S+P"])
def test_parse_modalities_forms(text):
    assert parse_modalities(text) == ("P", "S")


def test_parse_modalities_rejects_unknown():
    with pytest.raises(ValueError):
        parse_modalities("P,X")
    with pytest.raises(ValueError):
        parse_modalities("")


def test_init_shapes_and_uniform_modality_weights(params, vocabulary):
    assert params["point.w0"].shape == (3, 64)
    assert params["rel.w"].shape == (len(vocabulary.predicates), EMBED_DIM)
    assert params["attr.w"].shape == (len(vocabulary.attributes), EMBED_DIM)
    np.testing.assert_array_equal(params["struct.gat0.diag"].data, np.ones(128))
    assert params.modality_weights() == pytest.approx({m: 0.25 for m in "PSRA"})


def test_trainable_follows_active_modalities(vocabulary):
    partial = ModelParams.init(vocabulary, modalities=("R", "A"))
    names = {tensor.name for tensor in partial.trainable()}
    assert "rel.w" in names and "attr.b" in names and "modality.w" in names
    assert not any(name.startswith(("point.", "struct.")) for name in names)


def test_normalize_cloud_unit_radius():
    points = np.random.default_rng(0).normal(size=(50, 3)) * 4.0 + 10.0
    normalized = normalize_cloud(points)
    np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
    assert np.sqrt((normalized**2).sum(axis=1)).max() == pytest.approx(1.0)


def test_object_encoder_ignores_point_order_and_offset(params, room_graph):
    """Shuffled and translated clouds embed identically."""
    cloud = room_graph.node(1).cloud
    rng = np.random.default_rng(1)
    shuffled = cloud.points[rng.permutation(len(cloud))]
    moved = InstancePointCloud(shuffled + np.array([3.0, -1.0, 0.5]))
    np.testing.assert_allclose(
        encode_object(params, moved).data,
        encode_object(params, cloud).data,
        rtol=1e-4,
        atol=1e-5,
    )


def test_object_encoder_needs_full_clouds(params):
    with pytest.raises(ShapeError):
        encode_objects(params, [InstancePointCloud(np.zeros((10, 3)))])


def test_structure_graph_hub_and_features(room_graph):
    sg = build_structure_graph(room_graph)
    assert sg.hub == 1
    np.testing.assert_allclose(sg.node_features[0], 0.0, atol=1e-12)
    mask = sg.adjacency()
    assert np.array_equal(mask, mask.T)
    assert mask.diagonal().all()
    assert not mask[1, 2]  # nodes 2 and 3 are not connected


def test_structure_hub_tie_breaks_to_lowest_id(room_graph):
    chain = room_graph.with_changes(relationships=room_graph.relationships[:1])
    assert build_structure_graph(chain).hub == 1


def test_gat_attention_respects_neighbourhoods():
    rng = np.random.default_rng(2)
    mask = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    h = Tensor(rng.normal(size=(3, 4)))
    attn = Tensor(rng.normal(size=8))
    out, weights = gat_layer(h, Tensor(np.ones(4)), attn, mask)
    assert out.shape == (3, 4)
    np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, rtol=1e-6)
    assert np.all(weights.data[~mask] == 0.0)


def test_gat_layers_on_triangle_match_hand_computation():
    mask = np.ones((3, 3), dtype=bool)
    h = np.array([[1.0, -0.5], [0.2, 0.8], [-1.0, 0.3]])
    layers = (
        (np.array([1.0, 0.5]), np.array([0.3, -0.2, 0.1, 0.4])),
        (np.array([2.0, -1.0]), np.array([-0.5, 0.2, 0.3, 0.1])),
    )

    expected = h
    for diag, attn in layers:
        z = expected * diag
        logits = np.array(
            [[z[i] @ attn[:2] + z[j] @ attn[2:] for j in range(3)] for i in range(3)]
        )
        logits = np.where(logits > 0, logits, 0.2 * logits)
        weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        mixed = weights @ z
        expected = np.where(mixed > 0, mixed, np.expm1(mixed))

    with nn.default_dtype(np.float64):
        out = Tensor(h)
        for diag, attn in layers:
            out, _ = gat_layer(out, Tensor(diag), Tensor(attn), mask)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_structure_encoder_gradients(vocabulary, room_graph):
    """Tape gradients through two attention layers match finite differences."""
    with nn.default_dtype(np.float64):
        params = ModelParams.init(vocabulary, seed=3)
        sg = build_structure_graph(room_graph)
        rng = np.random.default_rng(4)
        weights = rng.normal(size=(len(room_graph.nodes), EMBED_DIM))

        def loss_fn():
            return nn.reduce_sum(encode_structure(params, sg) * weights)

        with Tape() as tape:
            loss = loss_fn()
        nn.backward(tape, loss)

        for name in ("struct.gat1.diag", "struct.gat0.attn"):
            tensor = params[name]
            for index in range(0, tensor.size, 37):
                original = tensor.data[index]
                tensor.data[index] = original + 1e-6
                plus = loss_fn().item()
                tensor.data[index] = original - 1e-6
                minus = loss_fn().item()
                tensor.data[index] = original
                numeric = (plus - minus) / 2e-6
                assert tensor.grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_relationship_inputs_multi_hot(room_graph):
    inputs = relationship_inputs(room_graph)
    hub_row = inputs[room_graph.index_of(1)]
    np.testing.assert_array_equal(hub_row, [1.0, 0.0, 1.0, 1.0, 0.0])
    row_4 = inputs[room_graph.index_of(4)]
    np.testing.assert_array_equal(row_4, [0.0, 0.0, 0.0, 1.0, 0.0])


def test_attribute_inputs(room_graph):
    inputs = attribute_inputs(room_graph.nodes, 4)
    assert inputs.sum() == len(room_graph.nodes)
    assert inputs[room_graph.index_of(2), 2] == 1.0


def test_joint_embedding_blocks_scaled_by_modality_weights(params, room_graph):
    embeddings = embed_scene(params, room_graph)
    assert embeddings.joint.shape == (4, 4 * EMBED_DIM)
    blocks = embeddings.joint.data.reshape(4, 4, EMBED_DIM)
    np.testing.assert_allclose(np.linalg.norm(blocks, axis=2), 0.25, rtol=1e-5)
    for unit in embeddings.uni.values():
        np.testing.assert_allclose(np.linalg.norm(unit.data, axis=1), 1.0, rtol=1e-5)


def test_embed_scene_subset_of_modalities(vocabulary, room_graph):
    params = ModelParams.init(vocabulary, modalities=("S", "A"))
    embeddings = embed_scene(params, room_graph)
    assert set(embeddings.uni) == {"S", "A"}
    assert embeddings.joint.shape == (4, 2 * EMBED_DIM)


def test_embedding_file_round_trip(tmp_path, params, room_graph):
    embeddings = embed_scene(params, room_graph)
    path = tmp_path / "room.sgem"
    save_embeddings(embeddings, path)

    loaded = load_embeddings(path)
    assert loaded.scene_id == "room"
    assert loaded.node_ids == embeddings.node_ids
    np.testing.assert_array_equal(loaded.joint.data, embeddings.joint.data)
    np.testing.assert_array_equal(loaded.uni["S"].data, embeddings.uni["S"].data)
