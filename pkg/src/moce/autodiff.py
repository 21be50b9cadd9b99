"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray. While a ``Tape`` is active, every operation
appends one node recording its inputs and a vector-Jacobian closure; the
append order is a topological order of the computation, so ``backward``
visits nodes exactly once in reverse. With no active tape, operations
compute values only, which is what evaluation mode and the finite-difference
harness rely on.

Gradients never flow through integer index arrays (gather/scatter indices,
argmax positions); those are constants of the forward pass.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyAxis(ValueError):
    """A reduction was requested over an axis of length zero."""


class IndexOutOfRange(IndexError):
    """A gather or scatter index lies outside the valid range."""


class NotScalar(ValueError):
    """backward() needs a scalar loss on the active tape."""


class AllMaskedRow(ValueError):
    """softmax saw a row consisting entirely of the minus-infinity sentinel."""


def neg_inf(dtype=np.float64) -> float:
    """Most-negative finite value of ``dtype``, used as the -inf sentinel."""
    return float(np.finfo(dtype).min)


_erf = np.vectorize(math.erf, otypes=[np.float64])
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Node:
    """One recorded operation: inputs and a vector-Jacobian product."""

    __slots__ = ("inputs", "vjp", "tape")

    def __init__(self, inputs, vjp, tape):
        self.inputs = inputs
        self.vjp = vjp
        self.tape = tape


class Tensor:
    """Array value, optionally a leaf of the differentiation tape.

    ``requires_grad`` marks leaves that should receive gradients. Results of
    operations on such tensors carry ``node`` references while a tape is
    active; ``Tape.backward`` fills ``grad`` on every requires_grad leaf it
    reaches.
    """

    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class Tape:
    """Append-only record of operations, consumed once by ``backward``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: list[Tensor] = []

    def __enter__(self):
        if getattr(_state, "tape", None) is not None:
            self._outer = _state.tape
        else:
            self._outer = None
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._outer
        return False

    def _record(self, out: Tensor, inputs: tuple, vjp: Callable):
        node = Node(inputs, vjp, self)
        out.node = node
        out.requires_grad = True
        self.nodes.append(node)
        self._outputs.append(out)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of the scalar ``loss`` into every
        requires_grad leaf reachable from it. Returns the leaf gradient map
        and also stores each gradient on ``leaf.grad``.
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise NotScalar("loss is not an output of this tape")

        start = self.nodes.index(loss.node)
        node_grads: dict[int, np.ndarray] = {
            id(loss.node): np.ones_like(loss.data)
        }
        leaf_grads: dict[Tensor, np.ndarray] = {}

        for pos in range(start, -1, -1):
            node = self.nodes[pos]
            gout = node_grads.pop(id(node), None)
            if gout is None:
                continue
            for tensor, gin in zip(node.inputs, node.vjp(gout)):
                if gin is None:
                    continue
                if tensor.node is not None and tensor.node.tape is self:
                    key = id(tensor.node)
                    if key in node_grads:
                        node_grads[key] = node_grads[key] + gin
                    else:
                        node_grads[key] = gin
                elif tensor.requires_grad:
                    if tensor in leaf_grads:
                        leaf_grads[tensor] = leaf_grads[tensor] + gin
                    else:
                        leaf_grads[tensor] = gin.copy()

        for tensor, grad in leaf_grads.items():
            tensor.grad = grad
        return leaf_grads


def _should_record(*tensors: Tensor) -> Tape | None:
    tape = _active_tape()
    if tape is None:
        return None
    for t in tensors:
        if t.requires_grad or t.node is not None:
            return tape
    return None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a: Tensor, b: Tensor, out_data, da_fn, db_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _should_record(a, b)
    if tape is not None:
        def vjp(g):
            ga = _unbroadcast(da_fn(g), a.data.shape) if (a.requires_grad or a.node) else None
            gb = _unbroadcast(db_fn(g), b.data.shape) if (b.requires_grad or b.node) else None
            return ga, gb
        tape._record(out, (a, b), vjp)
    return out


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"cannot broadcast shapes {a.data.shape} and {b.data.shape}"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _binary(
        a, b, a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def _unary(x: Tensor, out_data, dx_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _should_record(x)
    if tape is not None:
        tape._record(out, (x,), lambda g: (dx_fn(g),))
    return out


def negate(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def softplus(x: Tensor) -> Tensor:
    # log(1 + exp(x)); for x > 30 the linear branch avoids exp overflow and
    # is exact to double precision
    big = x.data > 30.0
    y = np.where(big, x.data, np.log1p(np.exp(np.minimum(x.data, 30.0))))
    s = _sigmoid(x.data)
    return _unary(x, y, lambda g: g * s)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def dx(g):
        # derivative at exactly 0 is defined as 0 so a zero-variance input
        # yields a zero (not NaN) gradient
        g = np.asarray(g)
        denom = 2.0 * y
        safe = np.where(denom == 0.0, 1.0, denom)
        return np.where(denom == 0.0, 0.0, g / safe)

    return _unary(x, y, dx)


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF, exact erf with the Gaussian density gradient."""
    y = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    if x.data.dtype != np.float64:
        y = y.astype(x.data.dtype)
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
    return _unary(x, y, lambda g: g * pdf)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; 1-D operands are promoted and squeezed back."""
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1
    A = a.data[None, :] if a_vec else a.data
    B = b.data[:, None] if b_vec else b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.data.shape} and {b.data.shape}")
    out_data = A @ B
    if a_vec:
        out_data = out_data[0]
    if b_vec:
        out_data = out_data[..., 0]
    out = Tensor(out_data)
    tape = _should_record(a, b)
    if tape is not None:
        def vjp(g):
            G = np.asarray(g)
            if a_vec and b_vec:
                G = G.reshape(1, 1)
            elif a_vec:
                G = G.reshape(1, -1)
            elif b_vec:
                G = G.reshape(-1, 1)
            ga = (G @ B.T) if (a.requires_grad or a.node) else None
            gb = (A.T @ G) if (b.requires_grad or b.node) else None
            if ga is not None and a_vec:
                ga = ga[0]
            if gb is not None and b_vec:
                gb = gb[:, 0]
            return ga, gb
        tape._record(out, (a, b), vjp)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``. Entries equal to the -inf sentinel become
    exact zeros; a slice made entirely of the sentinel raises AllMaskedRow.
    """
    sentinel = neg_inf(x.data.dtype)
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.any(m <= sentinel):
        raise AllMaskedRow("softmax row contains only the -inf sentinel")
    e = np.exp(x.data - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def dx(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return y * (g - inner)

    return _unary(x, y, dx)


def _norm_axis(x: Tensor, axis):
    if axis is None:
        return None
    ax = axis if axis >= 0 else x.data.ndim + axis
    if ax < 0 or ax >= x.data.ndim:
        raise ShapeMismatch(f"axis {axis} out of range for shape {x.data.shape}")
    return ax


def _check_not_empty(x: Tensor, axis):
    if axis is None:
        if x.data.size == 0:
            raise EmptyAxis("reduction over an empty tensor")
    elif x.data.shape[axis] == 0:
        raise EmptyAxis(f"reduction over empty axis {axis}")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(x, axis)
    _check_not_empty(x, axis)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def dx(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape).copy()

    return _unary(x, y, dx)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(x, axis)
    _check_not_empty(x, axis)
    n = x.data.size if axis is None else x.data.shape[axis]
    y = np.mean(x.data, axis=axis, keepdims=keepdims)

    def dx(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, x.data.shape) / n
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape) / n

    return _unary(x, y, dx)


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along an axis; gradient flows only to the first argmax."""
    axis = _norm_axis(x, axis)
    _check_not_empty(x, axis)
    y = np.max(x.data, axis=axis, keepdims=keepdims)

    if axis is None:
        flat_idx = int(np.argmax(x.data))

        def dx(g):
            out = np.zeros_like(x.data)
            out.flat[flat_idx] = np.asarray(g).reshape(())
            return out
    else:
        idx = np.argmax(x.data, axis=axis)

        def dx(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            out = np.zeros_like(x.data)
            np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
            return out

    return _unary(x, y, dx)


def scatter_segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """out[s] = sum of values rows whose segment id is s.

    ``segment_ids`` is a constant integer vector aligned with axis 0 of
    ``values``; gradients gather straight back through it.
    """
    ids = np.asarray(segment_ids)
    if ids.ndim != 1 or ids.shape[0] != values.data.shape[0]:
        raise ShapeMismatch(
            f"segment ids shape {ids.shape} does not match rows {values.data.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexOutOfRange("segment id outside [0, num_segments)")
    out_shape = (num_segments,) + values.data.shape[1:]
    out_data = np.zeros(out_shape, dtype=values.data.dtype)
    np.add.at(out_data, ids, values.data)
    return _unary(values, out_data, lambda g: np.asarray(g)[ids])


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of ``x`` by a constant index vector (embedding lookup)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexOutOfRange("row index outside [0, rows)")

    def dx(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, np.asarray(g))
        return out

    return _unary(x, x.data[idx], dx)


def gather_cols(x: Tensor, indices) -> Tensor:
    """Row-wise gather: out[i, j] = x[i, indices[i, j]] for a 2-D ``x``."""
    idx = np.asarray(indices)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
        raise ShapeMismatch(
            f"gather_cols needs matching 2-D shapes, got {x.data.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise IndexOutOfRange("column index outside [0, cols)")
    rows = np.arange(x.data.shape[0])[:, None]

    def dx(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), np.asarray(g))
        return out

    return _unary(x, x.data[rows, idx], dx)


def mask_fill(x: Tensor, keep_mask, fill_value: float) -> Tensor:
    """Keep entries where the constant boolean mask is True, set the rest to
    ``fill_value``. Gradient passes only through kept entries.
    """
    keep = np.asarray(keep_mask, dtype=bool)
    if keep.shape != x.data.shape:
        raise ShapeMismatch(f"mask shape {keep.shape} != tensor shape {x.data.shape}")
    out_data = np.where(keep, x.data, x.data.dtype.type(fill_value))
    return _unary(x, out_data, lambda g: np.asarray(g) * keep)


def reshape(x: Tensor, shape) -> Tensor:
    return _unary(
        x, x.data.reshape(shape),
        lambda g: np.asarray(g).reshape(x.data.shape),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradients split back by the same offsets."""
    if not tensors:
        raise ShapeMismatch("concat of an empty sequence")
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    out = Tensor(out_data)
    tape = _should_record(*tensors)
    if tape is not None:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            g = np.asarray(g)
            pieces = []
            for i, t in enumerate(tensors):
                if t.requires_grad or t.node is not None:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    pieces.append(g[tuple(sl)])
                else:
                    pieces.append(None)
            return tuple(pieces)

        tape._record(out, tuple(tensors), vjp)
    return out


@dataclass
class FdReport:
    """Result of a finite-difference gradient verification run."""

    passed: bool
    max_rel_error: float
    coordinates_checked: int
    failures: list = field(default_factory=list)
    worst: tuple | None = None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.coordinates_checked} coordinates, "
            f"max rel err {self.max_rel_error:.3e}"
        )


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    rel_tol: float = 1e-4,
) -> FdReport:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    Every coordinate of every requires_grad input is perturbed by ``step``
    in both directions. The relative error metric is
    |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12). Inputs should be float64 for
    the stated tolerances to be meaningful.
    """
    with Tape() as tape:
        loss = f(*inputs)
        grads = tape.backward(loss)

    max_rel = 0.0
    checked = 0
    failures = []
    worst = None
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        g_ad = grads.get(x)
        if g_ad is None:
            g_ad = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(f(*inputs).data)
            flat[j] = orig - step
            lo = float(f(*inputs).data)
            flat[j] = orig
            g_fd = (hi - lo) / (2.0 * step)
            g_a = float(g_ad.reshape(-1)[j])
            rel = abs(g_a - g_fd) / (abs(g_a) + abs(g_fd) + 1e-12)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (i, j, g_a, g_fd, rel)
            if rel > rel_tol:
                failures.append((i, j, g_a, g_fd, rel))
    return FdReport(
        passed=not failures,
        max_rel_error=max_rel,
        coordinates_checked=checked,
        failures=failures,
        worst=worst,
    )
