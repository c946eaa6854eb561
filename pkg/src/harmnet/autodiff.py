"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations run eagerly. While a :class:`Tape` is active (``with Tape() as
tape:``) every primitive whose inputs require gradients appends a node to it;
:func:`backward` then sweeps the tape in reverse.

Layer-specific primitives (convolution, pooling, recurrent sweeps) live next
to their layers and register through :func:`record`.
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name):
    if isinstance(name, str):
        try:
            return np.dtype(_DTYPES[name])
        except KeyError:
            raise ParameterError(f"unknown precision {name!r}; expected float64 or float32") from None
    return np.dtype(name)


class Tensor:
    """An n-d float array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar for composing small graphs
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


@dataclass
class Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable
    op: str


@dataclass
class Tape:
    """Ordered record of primitive applications."""

    nodes: List[Node] = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


def record(out_data, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record its node on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    input, in order.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), out, backward_fn, op)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of ``a`` are treated as batch axes.

    ``b`` may be a matrix (shared across the batch) or carry the same
    leading axes as ``a``.
    """
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ: {a.shape} and {b.shape}")
    A, Bm = a.data, b.data
    out = A @ Bm

    def back(g):
        ga = g @ np.swapaxes(Bm, -1, -2)
        if Bm.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), back, "matmul")


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    A, Bv = a.data, b.data
    out = A * Bv
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g * Bv, A.shape), _unbroadcast(g * A, Bv.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def apply_activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise tanh, sigmoid or relu (relu'(0) = 0)."""
    X = x.data
    if kind == "tanh":
        y = np.tanh(X)
        return record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    if kind == "sigmoid":
        y = 0.5 * (np.tanh(0.5 * X) + 1.0)
        return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    if kind == "relu":
        on = X > 0
        y = np.where(on, X, 0.0).astype(X.dtype, copy=False)
        return record(y, (x,), lambda g: (g * on,), "relu")
    raise ParameterError(f"unknown activation {kind!r}; expected tanh, sigmoid or relu")


def softmax_rows(x: Tensor, beta: float = 1.0, mask=None) -> Tensor:
    """Softmax over the last axis of ``x / beta`` with max subtraction.

    Positions where ``mask`` is false get probability exactly 0; every row
    needs at least one unmasked entry.
    """
    if not beta > 0:
        raise ParameterError(f"softmax beta must be positive, got {beta}")
    s = x.data / beta
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has every position masked")
        s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        gs = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (gs / beta,)

    return record(p, (x,), back, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    nd = tensors[0].data.ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(sizes))
        )

    return record(out, tuple(tensors), back, "concat")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    m = keep.astype(x.dtype) / (1.0 - rate)
    return record(x.data * m, (x,), lambda g: (g * m,), "dropout")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index_select(x: Tensor, axis: int, index) -> Tensor:
    """``np.take`` along one axis with scatter-add backward."""
    index = np.asarray(index)
    out = np.take(x.data, index, axis=axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        if index.ndim == 0:
            moved[index] += np.moveaxis(np.expand_dims(g, axis), axis, 0)[0]
        else:
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return record(out, (x,), back, "index_select")


def take_rows(x: Tensor, rows) -> Tensor:
    """Pick ``x[b, rows[b]]`` for every leading index ``b`` of a 3-d tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    bidx = np.arange(x.shape[0])
    out = x.data[bidx, rows]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, g.dtype)
        gx[bidx, rows] = g
        return (gx,)

    return record(out, (x,), back, "take_rows")


def pick(x: Tensor, cols) -> Tensor:
    """``x[i, cols[i]]`` for a 2-d tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    ridx = np.arange(x.shape[0])
    out = x.data[ridx, cols]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, g.dtype)
        gx[ridx, cols] = g
        return (gx,)

    return record(out, (x,), back, "pick")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    X = x.data
    live = X > floor
    safe = np.where(live, X, floor)
    out = np.log(safe)
    return record(out, (x,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record(out, (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return record(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def max_over(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal entry."""
    X = x.data
    arg = X.argmax(axis=axis)
    out = np.take_along_axis(X, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(X)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record(out, (x,), back, "max_over")


# ---------------------------------------------------------------------------
# backward sweep and verification
# ---------------------------------------------------------------------------

GradientMap = Dict[str, np.ndarray]


def backward(tape: Tape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradientMap:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    With ``params`` given, the result has exactly those keys; parameters off
    every path to the loss get zero gradients. Without it, every named leaf
    that requires gradients is reported.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    seen_leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                seen_leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
    if params is None:
        params = {t.name: t for t in seen_leaves.values() if t.name is not None}
    return {
        name: grads.get(id(p), np.zeros_like(p.data)).astype(p.dtype, copy=False)
        for name, p in params.items()
    }


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_diff_errors(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-6,
    frozen: Optional[Mapping[str, np.ndarray]] = None,
) -> Dict[str, float]:
    """Per-parameter max relative error between backward() and central differences.

    ``f`` takes no arguments and reads the current parameter values; it must
    be deterministic. ``frozen`` maps a parameter name to a boolean array of
    coordinates excluded from the comparison (their gradient is discarded
    by design, e.g. the padding embedding row).
    """
    frozen = frozen or {}
    with no_grad():
        f0 = float(f().data)
        f1 = float(f().data)
    if f0 != f1:
        raise ContractError("finite_diff_check: objective is not deterministic")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)
    errors = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            skip = np.zeros(flat.size, bool)
            if name in frozen:
                skip = np.broadcast_to(np.asarray(frozen[name], bool), p.shape).reshape(-1)
            numeric = np.zeros(flat.size, dtype=np.float64)
            for i in np.flatnonzero(~skip):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(f().data)
                flat[i] = orig - epsilon
                fm = float(f().data)
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * epsilon)
            err = _rel_err(analytic[name].reshape(-1), numeric)
            errors[name] = float(err[~skip].max(initial=0.0))
    return errors


def finite_diff_check(f: Callable[[], Tensor], params, epsilon: float = 1e-6, frozen=None) -> float:
    """Max relative error over every coordinate of every parameter."""
    if not isinstance(params, Mapping):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    errors = finite_diff_errors(f, params, epsilon, frozen)
    return max(errors.values(), default=0.0)
