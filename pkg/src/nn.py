"""
Dense tensors with tape-based reverse-mode differentiation and AdamW.

Values are stored as float32 by default; reductions accumulate in float64.
A `Tape` records an operation only while it is active on the current thread
and at least one input requires a gradient.
"""
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGNN"
CHECKPOINT_VERSION = 1

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Backward pass or optimizer step cannot proceed."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def get_default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of new tensors on this thread."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """N-dimensional array node with an optional gradient buffer."""

    __array_ufunc__ = None  # ndarray (op) Tensor dispatches to the Tensor operator

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(
                f"item() needs a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward
    op: str


class Tape:
    """
    Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a topological order.
    """

    def __init__(self):
        self.records: List[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def record(
        self,
        output: Tensor,
        inputs: Tuple[Tensor, ...],
        backward: Backward,
        op: str,
    ) -> None:
        self.records.append(Record(output, inputs, backward, op))


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward, op: str
) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic ----------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
        "mul",
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


# --- structural ops ------------------------------------------------------------


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward, "concat")


def take(t: TensorLike, index) -> Tensor:
    """Basic or integer-array indexing (`slice`); repeated indices accumulate."""
    t = as_tensor(t)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def backward(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(t.data[index], (t,), backward, "take")


slice_ = take


def reshape(t: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    t = as_tensor(t)
    try:
        data = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}") from None
    return _result(data, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t: TensorLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    t = as_tensor(t)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(
        np.transpose(t.data, axes),
        (t,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def detach(t: TensorLike) -> Tensor:
    """Copy without gradient connection."""
    return Tensor(as_tensor(t).data)


# --- nonlinearities --------------------------------------------------------------


def relu(t: TensorLike) -> Tensor:
    t = as_tensor(t)
    return _result(np.maximum(t.data, 0), (t,), lambda g: (g * (t.data > 0),), "relu")


def leaky_relu(t: TensorLike, slope: float = 0.2) -> Tensor:
    t = as_tensor(t)
    scale = np.where(t.data > 0, 1.0, slope).astype(t.data.dtype)
    return _result(t.data * scale, (t,), lambda g: (g * scale,), "leaky_relu")


def elu(t: TensorLike, alpha: float = 1.0) -> Tensor:
    t = as_tensor(t)
    negative = alpha * np.expm1(np.minimum(t.data, 0))
    out = np.where(t.data > 0, t.data, negative)
    slope = np.where(t.data > 0, 1.0, negative + alpha)
    return _result(out, (t,), lambda g: (g * slope,), "elu")


def exp(t: TensorLike) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)
    return _result(out, (t,), lambda g: (g * out,), "exp")


def log(t: TensorLike) -> Tensor:
    t = as_tensor(t)
    return _result(np.log(t.data), (t,), lambda g: (g / t.data,), "log")


def softplus(t: TensorLike) -> Tensor:
    """log(1 + e^x), computed stably."""
    t = as_tensor(t)
    out = np.logaddexp(0, t.data)
    sigmoid = np.exp(t.data - out)
    return _result(out, (t,), lambda g: (g * sigmoid,), "softplus")


def softmax(t: TensorLike, axis: int = -1, temperature: float = 1.0) -> Tensor:
    t = as_tensor(t)
    scaled = t.data / temperature
    shifted = np.exp(scaled - scaled.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((out * (g - np.sum(g * out, axis=axis, keepdims=True))) / temperature,)

    return _result(out, (t,), backward, "softmax")


def log_softmax(t: TensorLike, axis: int = -1, temperature: float = 1.0) -> Tensor:
    t = as_tensor(t)
    scaled = t.data / temperature
    peak = scaled.max(axis=axis, keepdims=True)
    lse = peak + np.log(np.exp(scaled - peak).sum(axis=axis, keepdims=True))
    out = scaled - lse
    probs = np.exp(out)

    def backward(g):
        return ((g - probs * np.sum(g, axis=axis, keepdims=True)) / temperature,)

    return _result(out, (t,), backward, "log_softmax")


def l2_normalize(t: TensorLike, axis: int = -1) -> Tensor:
    """
    Scale vectors along `axis` to unit length.

    Zero-norm vectors map to zero vectors (with a warning) and pass no gradient.
    """
    t = as_tensor(t)
    norm = np.sqrt(np.sum(t.data.astype(np.float64) ** 2, axis=axis, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        logger.warning(
            f"l2_normalize: {int(zero.sum())} zero-norm vector(s) replaced by zeros"
        )
    safe = np.where(zero, 1.0, norm)
    out = np.where(zero, 0.0, t.data / safe).astype(t.data.dtype)

    def backward(g):
        grad = (g - out * np.sum(g * out, axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0.0, grad).astype(g.dtype),)

    return _result(out, (t,), backward, "l2_normalize")


# --- reductions ------------------------------------------------------------------


def _restore_axis(
    g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool
) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(
    t: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    t = as_tensor(t)
    out = np.sum(t.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(t.data.dtype)
    return _result(
        out,
        (t,),
        lambda g: (np.array(_restore_axis(g, t.shape, axis, keepdims)),),
        "reduce_sum",
    )


def reduce_mean(
    t: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    t = as_tensor(t)
    count = t.size if axis is None else t.shape[axis]
    out = np.mean(t.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(t.data.dtype)
    return _result(
        out,
        (t,),
        lambda g: (np.array(_restore_axis(g, t.shape, axis, keepdims)) / count,),
        "reduce_mean",
    )


def reduce_max(
    t: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    """Maximum along `axis`; the gradient goes to the first maximal entry."""
    t = as_tensor(t)
    out = np.max(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            mask = np.zeros(t.size, dtype=g.dtype)
            mask[int(np.argmax(t.data))] = 1
            return (mask.reshape(t.shape) * np.reshape(g, ()),)
        winner = np.expand_dims(np.argmax(t.data, axis=axis), axis)
        mask = np.zeros(t.shape, dtype=g.dtype)
        np.put_along_axis(mask, winner, 1, axis=axis)
        return (mask * _restore_axis(g, t.shape, axis, keepdims),)

    return _result(out, (t,), backward, "reduce_max")


# --- differentiation -----------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """
    Propagate d(loss) to every gradient-requiring leaf used on `tape`.

    Gradients add into existing `grad` buffers. Leaves that were used but
    received no gradient get a zero buffer.

    Raises:
        GradientError: loss is not a scalar or was not produced on this tape
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(record.output) for record in tape.records}
    if id(loss) not in produced:
        raise GradientError("loss was not recorded on the given tape")

    grads: Dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=loss.data.dtype)
    }
    leaves: Dict[int, Tensor] = {}
    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        input_grads = record.backward(g)
        for tensor, tensor_grad in zip(record.inputs, input_grads):
            if not tensor.requires_grad or tensor_grad is None:
                continue
            if tensor_grad.shape != tensor.shape:
                raise ShapeError(
                    f"{record.op} backward: gradient shape {tensor_grad.shape} "
                    f"for input {tensor.shape}"
                )
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tensor_grad
            else:
                grads[key] = tensor_grad
            if key not in produced:
                leaves[key] = tensor

    for record in tape.records:
        for tensor in record.inputs:
            if tensor.requires_grad and id(tensor) not in produced:
                leaves.setdefault(id(tensor), tensor)
    for key, tensor in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(tensor.shape, dtype=tensor.data.dtype)
        g = g.astype(tensor.data.dtype)
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# --- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments and hyper-parameters (decoupled weight decay)."""

    learning_rate: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def opt_step(state: OptimizerState, params: Sequence[Tensor]) -> None:
    """
    Apply one AdamW update to `params` and clear their gradients.

    Raises:
        GradientError: a parameter has no gradient
    """
    missing = [p.name or str(i) for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise GradientError(f"missing gradient for parameter(s): {', '.join(missing)}")
    if not state.first_moment:
        state.first_moment = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.second_moment = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(
            f"optimizer tracks {len(state.first_moment)} parameters, "
            f"step got {len(params)}"
        )

    state.step_count += 1
    correction1 = 1.0 - state.beta1**state.step_count
    correction2 = 1.0 - state.beta2**state.step_count
    for i, param in enumerate(params):
        grad = param.grad.astype(np.float64)
        value = param.data.astype(np.float64)
        if state.first_moment[i].shape != param.shape:
            raise ShapeError(
                f"moment shape {state.first_moment[i].shape} != parameter {param.shape}"
            )
        b1, b2 = state.beta1, state.beta2
        state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * grad
        state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * grad**2
        m_hat = state.first_moment[i] / correction1
        v_hat = state.second_moment[i] / correction2
        value = value - state.learning_rate * state.weight_decay * value
        value = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = value.astype(param.data.dtype)
        param.grad = None


# --- checkpoints -----------------------------------------------------------------

_U32 = struct.Struct("<I")


def save_checkpoint(
    path: Path, params: Dict[str, np.ndarray], modality_order: str = "P,S,R,A"
) -> None:
    """
    Write named arrays as an SGNN file.

    Layout (little-endian): magic, version u32, modality-order string
    (u32 length + utf-8), record count u32, then per record: name length u32,
    name, rank u32, dims u32 x rank, f32 payload.
    """
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION)]
    order_bytes = modality_order.encode("utf-8")
    chunks += [_U32.pack(len(order_bytes)), order_bytes, _U32.pack(len(params))]
    for name, array in params.items():
        array = np.asarray(array, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks += [_U32.pack(len(name_bytes)), name_bytes, _U32.pack(array.ndim)]
        chunks += [_U32.pack(dim) for dim in array.shape]
        chunks.append(array.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], str]:
    """Read an SGNN file; returns (name -> f32 array, modality order string)."""
    path = Path(path)
    blob = path.read_bytes()
    offset = 0

    def read(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        chunk = blob[offset : offset + size]
        offset += size
        return chunk

    def read_u32() -> int:
        return _U32.unpack(read(4))[0]

    if read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SGNN checkpoint")
    version = read_u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    modality_order = read(read_u32()).decode("utf-8")
    params: Dict[str, np.ndarray] = {}
    for _ in range(read_u32()):
        name = read(read_u32()).decode("utf-8")
        shape = tuple(read_u32() for _ in range(read_u32()))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(read(4 * count), dtype="<f4")
        params[name] = values.reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return params, modality_order
