"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (64-bit by default, 32-bit switchable for
speed). Every differentiable operation appends an entry to a global
tape; ``backward`` replays the tape in reverse and accumulates
gradients into every ``requires_grad`` tensor reachable from the loss.
The tape is owned by a single training thread.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DTYPE = np.float64


def set_precision(kind: str) -> None:
    """Select the value dtype for newly created tensors: "f64" or "f32"."""
    global _DTYPE
    if kind == "f64":
        _DTYPE = np.float64
    elif kind == "f32":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision {kind!r}, expected 'f64' or 'f32'")


def precision() -> str:
    return "f64" if _DTYPE is np.float64 else "f32"


def default_dtype():
    return _DTYPE


class Tensor:
    """A dense n-dimensional value array with optional gradient storage."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.values.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.entries.append((tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.clear()


@contextmanager
def no_grad():
    """Disable taping inside the block (inference / metric evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def record_op(output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Tape a custom operation.

    ``backward(out_grad)`` must return one gradient array (or None) per
    input, in order. Recording only happens when gradients are enabled
    and at least one input requires them.
    """
    if _grad_enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _tape.record(inputs, output, backward)
    return output


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dx into every requires_grad tensor feeding loss.

    Repeated calls without zeroing gradients accumulate further.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _tape.entries:
        raise ContractError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for inputs, output, rule in reversed(_tape.entries):
        out_grad = grads.get(id(output))
        if out_grad is None:
            continue
        in_grads = rule(out_grad)
        for tensor, g in zip(inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=tensor.values.dtype)
                holders[key] = tensor
    for key, tensor in holders.items():
        if tensor.requires_grad:
            tensor.accumulate_grad(grads[key])


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)

    def rule(g):
        return [g @ b.values.T, a.values.T @ g]

    return record_op(out, (a, b), rule)


def _row_broadcastable(a_shape, b_shape) -> bool:
    # Equal shapes, or b is a per-channel row against a 2-D a.
    if a_shape == b_shape:
        return True
    if len(a_shape) == 2 and b_shape in ((a_shape[1],), (1, a_shape[1])):
        return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (_row_broadcastable(a.shape, b.shape) or _row_broadcastable(b.shape, a.shape)):
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = Tensor(a.values + b.values)

    def rule(g):
        return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]

    return record_op(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (_row_broadcastable(a.shape, b.shape) or _row_broadcastable(b.shape, a.shape)):
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}")
    out = Tensor(a.values - b.values)

    def rule(g):
        return [_reduce_to(g, a.shape), -_reduce_to(g, b.shape)]

    return record_op(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (_row_broadcastable(a.shape, b.shape) or _row_broadcastable(b.shape, a.shape)):
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    out = Tensor(a.values * b.values)

    def rule(g):
        return [
            _reduce_to(g * np.broadcast_to(b.values, g.shape), a.shape),
            _reduce_to(g * np.broadcast_to(a.values, g.shape), b.shape),
        ]

    return record_op(out, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    f = float(factor)
    out = Tensor(a.values * f)

    def rule(g):
        return [g * f]

    return record_op(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    out = Tensor(np.where(mask, a.values, 0.0))

    def rule(g):
        return [g * mask]

    return record_op(out, (a,), rule)


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: relu / add / sub / mul / scale."""
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b if not isinstance(b, Tensor) else b.item())
    if b is None:
        raise ShapeError(f"binary op {op_kind!r} needs two operands")
    table = {"add": add, "sub": sub, "mul": mul}
    if op_kind not in table:
        raise ValueError(f"unknown elementwise kind {op_kind!r}")
    return table[op_kind](a, b)


def reduce(op_kind: str, a: Tensor, axis: int | None = None) -> Tensor:
    """Reduce along one axis (or all axes when axis is None)."""
    a = _as_tensor(a)
    if axis is not None and not (0 <= axis < a.values.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {a.values.ndim}")
    if op_kind == "sum":
        out = Tensor(a.values.sum(axis=axis))

        def rule(g):
            if axis is None:
                return [np.full_like(a.values, float(g))]
            return [np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()]

        return record_op(out, (a,), rule)
    if op_kind == "mean":
        n = a.values.size if axis is None else a.shape[axis]
        out = Tensor(a.values.mean(axis=axis))

        def rule(g):
            if axis is None:
                return [np.full_like(a.values, float(g) / n)]
            return [np.broadcast_to(np.expand_dims(g, axis), a.shape) / n]

        return record_op(out, (a,), rule)
    if op_kind == "max":
        if axis is None:
            flat_idx = int(np.argmax(a.values))  # first index on ties
            out = Tensor(a.values.reshape(-1)[flat_idx])

            def rule(g):
                grad = np.zeros_like(a.values)
                grad.reshape(-1)[flat_idx] = float(g)
                return [grad]

            return record_op(out, (a,), rule)
        idx = np.argmax(a.values, axis=axis)  # first index on ties
        out = Tensor(np.take_along_axis(a.values, np.expand_dims(idx, axis), axis).squeeze(axis))

        def rule(g):
            grad = np.zeros_like(a.values)
            np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            return [grad]

        return record_op(out, (a,), rule)
    raise ValueError(f"unknown reduce kind {op_kind!r}")


def sum_all(a: Tensor) -> Tensor:
    return reduce("sum", a)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    out = Tensor(a.values[idx])

    def rule(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, idx, g)
        return [grad]

    return record_op(out, (a,), rule)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"column concat needs equal row counts, got {sorted(rows)}")
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=1))
    splits = np.cumsum(widths)[:-1]

    def rule(g):
        return list(np.split(g, splits, axis=1))

    return record_op(out, tuple(tensors), rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the row axis."""
    tensors = [_as_tensor(t) for t in tensors]
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ShapeError(f"row concat needs equal channel counts, got {sorted(cols)}")
    counts = [t.shape[0] for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=0))
    splits = np.cumsum(counts)[:-1]

    def rule(g):
        return list(np.split(g, splits, axis=0))

    return record_op(out, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# Serialization: header (rank u32, dims u32 each), little-endian f64 row-major
# ---------------------------------------------------------------------------


def tensor_to_bytes(t: Tensor) -> bytes:
    shape = t.values.shape
    header = struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    body = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
    return header + body


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
    offset += 8 * count
    return Tensor(values.astype(_DTYPE)), offset
