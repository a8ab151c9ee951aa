"""Tests for the tensor tape, its gradients, AdamW and SGNN checkpoints."""
import numpy as np
import pytest

from src import nn
from src.nn import CheckpointError, GradientError, ShapeError, Tape, Tensor


def numeric_gradient(fn, tensor, eps=1e-6):
    """Central differences of the scalar fn() with respect to tensor.data."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = tensor.data[index]
        tensor.data[index] = original + eps
        plus = fn().item()
        tensor.data[index] = original - eps
        minus = fn().item()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(build, shapes, seed=0):
    """Compare tape gradients of build(*tensors) with finite differences in float64."""
    rng = np.random.default_rng(seed)
    with nn.default_dtype(np.float64):
        tensors = [
            Tensor(rng.normal(size=shape), requires_grad=True) for shape in shapes
        ]
        with Tape() as tape:
            loss = build(*tensors)
        nn.backward(tape, loss)
        for tensor in tensors:
            expected = numeric_gradient(lambda: build(*tensors), tensor)
            np.testing.assert_allclose(tensor.grad, expected, rtol=1e-5, atol=1e-7)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with nn.default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_linear_layer_gradients():
    check_gradients(
        lambda x, w, b: nn.reduce_sum(nn.relu(x @ w + b) * 1.5),
        [(4, 3), (3, 5), (5,)],
    )


def test_arithmetic_gradients():
    check_gradients(
        lambda a, b: nn.reduce_mean((a - b) * a / (nn.exp(b) + 2.0)), [(3, 4), (1, 4)]
    )


def test_softmax_and_log_softmax_gradients():
    weights = np.arange(12, dtype=np.float64).reshape(3, 4)
    check_gradients(
        lambda x: nn.reduce_sum(nn.softmax(x, axis=1, temperature=0.5) * weights),
        [(3, 4)],
    )
    check_gradients(
        lambda x: nn.reduce_sum(nn.log_softmax(x, axis=0) * weights), [(3, 4)]
    )


def test_l2_normalize_gradients():
    weights = np.linspace(-1.0, 1.0, 15).reshape(3, 5)
    check_gradients(
        lambda x: nn.reduce_sum(nn.l2_normalize(x, axis=1) * weights), [(3, 5)]
    )


def test_nonlinearity_gradients():
    def mixed(x):
        return nn.elu(x) + nn.leaky_relu(x, 0.2) * 0.5 + nn.softplus(x) * 3.0

    check_gradients(lambda x: nn.reduce_sum(mixed(x)), [(4, 4)])
    check_gradients(lambda x: nn.reduce_mean(nn.log(nn.softplus(x))), [(6,)])


def test_structural_op_gradients():
    weights = np.arange(20, dtype=np.float64).reshape(4, 5)

    def build(a, b):
        joined = nn.concat([a, b], axis=1)
        flipped = nn.transpose(nn.reshape(joined, (5, 4)))
        return nn.reduce_sum(flipped * weights)

    check_gradients(build, [(2, 4), (2, 6)])


def test_take_accumulates_repeated_indices():
    with nn.default_dtype(np.float64):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with Tape() as tape:
            loss = nn.reduce_sum(nn.take(x, np.array([0, 2, 2, 3])))
        nn.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 2.0, 1.0])


def test_reduce_max_routes_gradient_to_winner():
    check_gradients(lambda x: nn.reduce_sum(nn.reduce_max(x, axis=1) * 2.0), [(3, 5)])
    with nn.default_dtype(np.float64):
        x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = nn.reduce_max(x)
        nn.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = nn.reduce_sum(x * 3.0)
        nn.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_unused_parameter_gets_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = nn.reduce_sum(x * 2.0 + unused * 0.0)
    nn.backward(tape, loss)
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_operations_outside_tape_are_not_recorded():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad
    with Tape() as tape:
        z = x * 2.0
    assert z.requires_grad and len(tape) == 1


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(GradientError):
        nn.backward(tape, y)


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = nn.reduce_sum(x)
    with pytest.raises(GradientError):
        nn.backward(Tape(), loss)


def test_shape_errors():
    with pytest.raises(ShapeError):
        nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()


def test_ndarray_on_the_left_yields_tensor():
    result = np.ones(2) + Tensor([1.0, 2.0])
    assert isinstance(result, Tensor)
    np.testing.assert_allclose(result.data, [2.0, 3.0])


def test_l2_normalize_zero_vector():
    out = nn.l2_normalize(Tensor(np.array([[0.0, 0.0], [3.0, 4.0]])), axis=1)
    np.testing.assert_allclose(out.data, [[0.0, 0.0], [0.6, 0.8]], rtol=1e-6)


def test_adamw_first_step_closed_form():
    """The bias-corrected first step moves each weight by lr * sign(g) after decay."""
    with nn.default_dtype(np.float64):
        param = Tensor([1.0, -2.0], requires_grad=True)
        param.grad = np.array([0.5, -4.0])
        state = nn.OptimizerState(learning_rate=0.1, weight_decay=0.01)
        nn.opt_step(state, [param])
    decayed = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01)
    expected = decayed - 0.1 * np.array([1.0, -1.0])
    np.testing.assert_allclose(param.data, expected, atol=1e-6)
    assert param.grad is None
    assert state.step_count == 1


def test_adamw_missing_gradient():
    with pytest.raises(GradientError, match="bias"):
        bias = Tensor([1.0], requires_grad=True, name="bias")
        nn.opt_step(nn.OptimizerState(), [bias])


def test_adamw_minimizes_quadratic():
    with nn.default_dtype(np.float64):
        x = Tensor([3.0, -2.0], requires_grad=True)
        state = nn.OptimizerState(learning_rate=0.05, weight_decay=0.0)
        for _ in range(400):
            with Tape() as tape:
                loss = nn.reduce_sum(x * x)
            nn.backward(tape, loss)
            nn.opt_step(state, [x])
    np.testing.assert_allclose(x.data, [0.0, 0.0], atol=0.1)


def test_checkpoint_round_trip(tmp_path):
    params = {
        "w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([0.5], dtype=np.float32),
        "scalar": np.array(2.0, dtype=np.float32),
    }
    path = tmp_path / "model.sgnn"
    nn.save_checkpoint(path, params, "P,S")

    loaded, order = nn.load_checkpoint(path)
    assert order == "P,S"
    assert list(loaded) == ["w", "b", "scalar"]
    for name, array in params.items():
        np.testing.assert_array_equal(loaded[name], array)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.sgnn"
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(CheckpointError, match="not an SGNN"):
        nn.load_checkpoint(path)


def test_checkpoint_truncated_and_trailing(tmp_path):
    path = tmp_path / "model.sgnn"
    nn.save_checkpoint(path, {"w": np.ones((3, 3), dtype=np.float32)})
    blob = path.read_bytes()

    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        nn.load_checkpoint(path)

    path.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        nn.load_checkpoint(path)
