"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward arithmetic runs on contiguous row-major numpy arrays.  Every op
whose inputs include a tensor with ``requires_grad=True`` appends one
node to the active tape; ``backward(loss)`` replays the tape in reverse,
accumulating dLoss/dLeaf into leaf ``grad`` buffers.  Broadcasting is
limited to what the model needs: equal shapes, a trailing row vector
against a matrix, and plain scalars.  There are no strided views; ops
that would create one copy instead.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

# When enabled, every op output is checked for NaN/Inf so divergence is
# caught at the op that produced it rather than steps later.
debug_checks = False


def enable_debug_checks(on: bool = True) -> None:
    global debug_checks
    debug_checks = on


class TapeNode:
    """One recorded op: output tensor, parent tensors, backward closure."""

    __slots__ = ("index", "op", "out", "parents", "backward_fn", "tape")

    def __init__(self, index, op, out, parents, backward_fn, tape):
        self.index = index
        self.op = op
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def parent_indices(self):
        """Tape indices of parents that are themselves op outputs."""
        return tuple(p.node.index for p in self.parents if p.node is not None)


class Tape:
    """Append-only record of differentiable ops in execution order.

    A node's parents always precede it, so one reverse sweep visits every
    node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.recording = True

    def append(self, op, out, parents, backward_fn) -> TapeNode:
        node = TapeNode(len(self.nodes), op, out, parents, backward_fn, self)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    """Discard the active tape (call between training steps).

    Tensors recorded on the old tape can no longer be backpropagated.
    """
    global _tape
    recording = _tape.recording
    _tape = Tape()
    _tape.recording = recording


@contextmanager
def no_grad():
    """Disable taping inside the block; outputs do not require grad."""
    prev = _tape.recording
    _tape.recording = False
    try:
        yield
    finally:
        _tape.recording = prev


class Tensor:
    """Float64 array with an optional gradient buffer and tape node.

    Leaf tensors created with ``requires_grad=True`` allocate their
    same-shape grad buffer eagerly; op outputs materialize theirs the
    first time backward reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "meta")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node: TapeNode | None = None
        self.meta: dict | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tsum(self) * (1.0 / self.data.size)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: Array, parents: Sequence[Tensor],
            backward_fn: Callable[[Array], None]) -> Tensor:
    """Wrap an op result, taping it when gradients are being tracked."""
    if debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"op '{op}' produced non-finite values")
    track = _tape.recording and any(p.requires_grad for p in parents)
    out = Tensor(out_data)
    if track:
        out.requires_grad = True   # grad buffer is lazy for op outputs
        out.node = _tape.append(op, out, tuple(parents), backward_fn)
    return out


def _accumulate(t: Tensor, g: Array) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce gradient g back down to the broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires-grad leaf behind ``loss``.

    Intermediate gradients are recomputed from scratch each call; leaf
    gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad += 1.0
        return
    if loss.node.tape is not _tape:
        raise ShapeError("loss is not on the active tape (tape was reset)")
    nodes = _tape.nodes
    for node in nodes[: loss.node.index + 1]:
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    needed = {loss.node.index}
    for node in reversed(nodes[: loss.node.index + 1]):
        if node.index not in needed or node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)
        for p in node.parents:
            if p.node is not None and p.requires_grad:
                needed.add(p.node.index)


def zero_grads(tensors) -> None:
    for t in tensors.values() if isinstance(tensors, dict) else tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record("add", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _record("neg", -a.data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), bwd)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, np.full_like(a.data, g.reshape(-1)[0]))

    return _record("sum", np.asarray(a.data.sum()), (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, np.sign(a.data) * g)

    return _record("abs", np.abs(a.data), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, out * g)

    return _record("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g / a.data)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, (a.data > 0) * g)

    return _record("relu", np.maximum(a.data, 0.0), (a,), bwd)


def _sigmoid(x: Array) -> Array:
    # Split by sign so exp never overflows; exact for |x| well past 500.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)

    def bwd(g):
        _accumulate(a, out * (1.0 - out) * g)

    return _record("sigmoid", out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, _sigmoid(a.data) * g)

    return _record("softplus", np.logaddexp(0.0, a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, (1.0 - out * out) * g)

    return _record("tanh", out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shapes {a.data.shape} and {b.data.shape} do not align")
    out = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record("matmul", out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got shape {a.data.shape}")

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.T))

    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), bwd)


def softmax(a: Tensor, axis: int = -1, mask: Array | None = None) -> Tensor:
    """Softmax along ``axis`` with an optional additive mask.

    ``mask`` is broadcast onto the logits; -inf entries are excluded and
    come out exactly 0.  A fully masked row is returned as all zeros (and
    flagged in ``out.meta``) rather than NaN.
    """
    a = _as_tensor(a)
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    if mask is None:
        z = a.data
        e = np.exp(z - np.max(z, axis=axis, keepdims=True))
        s = e.sum(axis=axis, keepdims=True)
        out = e / s
    else:
        z = a.data + mask
        m = np.max(z, axis=axis, keepdims=True)
        shifted = z - np.where(np.isfinite(m), m, 0.0)
        e = np.where(np.isfinite(z), np.exp(shifted), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    result = _record("softmax", out, (a,), bwd)
    if np.any(s == 0):
        result.meta = {"fully_masked_rows": np.argwhere(s.squeeze(axis) == 0)}
    return result


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        dxh = g * gain.data
        term = dxh - dxh.mean(axis=-1, keepdims=True) \
            - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv)

    return _record("layer_norm", out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# structural ops

def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; index -1 yields a zero row (for shifts/padding)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-d indices, got shape {idx.shape}")
    if np.any(idx >= a.data.shape[0]) or np.any(idx < -1):
        raise ShapeError(
            f"gather_rows index out of range for {a.data.shape[0]} rows")
    valid = idx >= 0
    out = np.zeros((idx.size,) + a.data.shape[1:], dtype=np.float64)
    out[valid] = a.data[idx[valid]]

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx[valid], g[valid])

    return _record("gather_rows", out, (a,), bwd)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def bwd(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, g[start:start + n])
            start += n

    return _record("concat_rows", out, tuple(tensors), bwd)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def bwd(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, np.ascontiguousarray(g[:, start:start + n]))
            start += n

    return _record("concat_cols", out, tuple(tensors), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(
            f"slice_rows [{start}:{stop}] out of range for {a.data.shape[0]} rows")
    out = a.data[start:stop].copy()

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _record("slice_rows", out, (a,), bwd)


# ---------------------------------------------------------------------------
# binary blob IO (little-endian: u64 rank, u64 extents, f64 payload)

def save_tensor_blob(arr: Array, fh) -> None:
    """Write one array to a binary file object in the flat blob format."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    fh.write(arr.astype("<f8").tobytes())


def load_tensor_blob(fh) -> Array:
    """Read one array written by :func:`save_tensor_blob`."""
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    if data.size != count:
        raise ShapeError(f"blob truncated: expected {count} values, got {data.size}")
    return data.reshape(shape)
