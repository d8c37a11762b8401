"""
Dense tensors with a reverse-mode gradient record.

Every differentiable op takes an optional `record`. When a record is given and
any input requires grad, the op appends its backward rule to the record and the
output requires grad. Without a record the op only computes values, which is
the inference path used by evaluation.

Storage is a numpy array. float32 is the training precision; tensors built with
`dtype=np.float64` stay in 64-bit through every op, which gradient checks use.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import ContractError, DimensionError, NumericalError

DEFAULT_DTYPE = np.float32
NORMALIZE_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=DEFAULT_DTYPE,
        name: Optional[str] = None,
    ):
        array = np.array(data, dtype=dtype)
        _check_finite(array, "tensor")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(array) if self.requires_grad else None
        )
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = np.zeros_like(array) if requires_grad else None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{req}{nm})"


@dataclass
class RecordEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class ComputationRecord:
    """Ordered log of differentiable ops; inputs always precede the ops that use them."""

    def __init__(self):
        self.entries: List[RecordEntry] = []
        self.swept = False

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: RecordEntry):
        if self.swept:
            raise ContractError("cannot extend a record that has already been swept")
        self.entries.append(entry)


def _check_finite(array: np.ndarray, op: str):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{op} produced non-finite values")


def _emit(
    op: str,
    value: np.ndarray,
    inputs: Sequence[Tensor],
    record: Optional[ComputationRecord],
    backward_fn: BackwardFn,
) -> Tensor:
    value = np.asarray(value)
    _check_finite(value, op)
    tracked = record is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, tracked)
    if tracked:
        record.append(RecordEntry(op, tuple(inputs), out, backward_fn))
    return out


def _require_rank(x: Tensor, rank: int, op: str):
    if x.data.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    _require_rank(a, 2, "matmul")
    _require_rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), record, backward)


def add_row_bias(
    x: Tensor, b: Tensor, record: Optional[ComputationRecord] = None
) -> Tensor:
    _require_rank(x, 2, "add_row_bias")
    _require_rank(b, 1, "add_row_bias")
    if x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match rows of {x.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _emit("add_row_bias", x.data + b.data, (x, b), record, backward)


def relu(x: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), record, backward)


def l2_normalize_rows(
    e: Tensor, eps: float = NORMALIZE_EPS, record: Optional[ComputationRecord] = None
) -> Tensor:
    _require_rank(e, 2, "l2_normalize_rows")
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    norm = np.sqrt(np.sum(e.data * e.data, axis=1, keepdims=True) + e.dtype.type(eps))
    y = e.data / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norm,)

    return _emit("l2_normalize_rows", y, (e,), record, backward)


def softmax_rows(z: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    _require_rank(z, 2, "softmax_rows")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _emit("softmax_rows", y, (z,), record, backward)


def log_softmax_rows(z: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    _require_rank(z, 2, "log_softmax_rows")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - log_norm
    p = np.exp(y)

    def backward(g):
        return (g - p * np.sum(g, axis=1, keepdims=True),)

    return _emit("log_softmax_rows", y, (z,), record, backward)


def transpose(x: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    _require_rank(x, 2, "transpose")

    def backward(g):
        return (g.T,)

    return _emit("transpose", np.ascontiguousarray(x.data.T), (x,), record, backward)


def reshape(
    x: Tensor, shape: Tuple[int, ...], record: Optional[ComputationRecord] = None
) -> Tensor:
    original = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} to {shape}: {e}")

    def backward(g):
        return (g.reshape(original),)

    return _emit("reshape", value, (x,), record, backward)


def gather_rows(
    x: Tensor, labels: Sequence[int], record: Optional[ComputationRecord] = None
) -> Tensor:
    """out[i] = x[i, labels[i]]"""
    _require_rank(x, 2, "gather_rows")
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"{len(idx)} labels for {x.shape[0]} rows")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ContractError(f"labels must lie in [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[rows, idx] = g
        return (dx,)

    return _emit("gather_rows", x.data[rows, idx], (x,), record, backward)


def exp(x: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _emit("exp", y, (x,), record, backward)


def power(x: Tensor, exponent: float, record: Optional[ComputationRecord] = None) -> Tensor:
    """x ** exponent for x >= 0; the derivative at x == 0 is taken as 0 unless exponent == 1."""
    if np.any(x.data < 0):
        raise ContractError("power expects non-negative input")
    base = x.data
    positive = base > 0
    y = np.power(base, x.dtype.type(exponent))

    def backward(g):
        if exponent == 0:
            return (np.zeros_like(g),)
        if exponent == 1:
            return (g,)
        safe = np.where(positive, base, 1).astype(base.dtype)
        local = np.where(positive, exponent * np.power(safe, exponent - 1), 0)
        return ((g * local).astype(g.dtype),)

    return _emit("power", y, (x,), record, backward)


def add(a: Tensor, b: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return _emit("add", a.data + b.data, (a, b), record, backward)


def mul(a: Tensor, b: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _emit("mul", A * B, (a, b), record, backward)


def affine(
    x: Tensor, scale: float, shift: float = 0.0, record: Optional[ComputationRecord] = None
) -> Tensor:
    """scale * x + shift with constant scale and shift."""
    s = x.dtype.type(scale)

    def backward(g):
        return (g * s,)

    return _emit("affine", x.data * s + x.dtype.type(shift), (x,), record, backward)


def scale(x: Tensor, s: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    """x multiplied by the single-valued tensor s."""
    if s.data.size != 1:
        raise DimensionError(f"scale factor must hold one value, got shape {s.shape}")
    X = x.data
    factor = s.data.reshape(())
    s_shape = s.shape

    def backward(g):
        return g * factor, np.sum(g * X).reshape(s_shape)

    return _emit("scale", X * factor, (x, s), record, backward)


def clamp_max(x: Tensor, limit: float, record: Optional[ComputationRecord] = None) -> Tensor:
    below = x.data < limit

    def backward(g):
        return (g * below,)

    value = np.where(below, x.data, x.dtype.type(limit)).astype(x.dtype)
    return _emit("clamp_max", value, (x,), record, backward)


def mean(x: Tensor, record: Optional[ComputationRecord] = None) -> Tensor:
    n = x.data.size
    shape = x.shape

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), record, backward)


def backward(loss: Tensor, record: ComputationRecord):
    """
    Sweep `record` in reverse, accumulating d(loss)/d(leaf) into every leaf's grad.

    Leaves accumulate, so callers zero them between iterations. A record can be
    swept once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record.swept:
        raise ContractError("record has already been swept")
    record.swept = True
    if not loss.requires_grad:
        return

    for entry in record.entries:
        entry.output.grad = np.zeros_like(entry.output.data)
    loss.grad = loss.grad + np.ones_like(loss.data)

    for entry in reversed(record.entries):
        upstream = entry.output.grad
        input_grads = entry.backward_fn(upstream)
        for tensor, g in zip(entry.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            tensor.grad = tensor.grad + np.asarray(g, dtype=tensor.dtype).reshape(tensor.shape)
