"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` and, when any
input requires a gradient, appends a node to the tape.  Nodes carry a
monotonically increasing sequence number; :meth:`Tensor.backward` collects
the nodes reachable from the loss and replays their adjoints in reverse
recorded order, so unrelated tape entries never influence the result.

Broadcasting is deliberately restricted to equal shapes and scalar-vs-tensor.
Anything else must go through :func:`broadcast_to`, whose adjoint is an
explicit sum.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "precision",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "record",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "maximum",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "elementwise",
    "matmul",
    "reduce",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "take",
    "log_softmax",
    "smooth_l1",
]

PRECISIONS = {"float64": np.float64, "float32": np.float32}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float64


_state = _State()
_sequence = itertools.count()


def default_dtype():
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def precision(mode: str):
    """Select the element type of newly created tensors ("float64" or "float32")."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    previous = _state.dtype
    _state.dtype = PRECISIONS[mode]
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_sequence)
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional array that may take part in gradient recording.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :meth:`backward`; gradients accumulate across calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else _state.dtype
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def max(self, axes=None):
        return reduce("max", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    # -- differentiation -----------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1 or self.data.ndim not in (0, 1):
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        _run_backward(self, grad)


def _run_backward(root: Tensor, seed: np.ndarray):
    if not root.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    # Reachable interior tensors, keyed by object identity.
    reachable: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in reachable:
            continue
        reachable[id(t)] = t
        stack.extend(p for p in t._node.parents if p.requires_grad)
    order = sorted(reachable.values(), key=lambda t: t._node.seq, reverse=True)

    adjoint: dict[int, np.ndarray] = {id(root): seed}
    for t in order:
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                pg = np.asarray(pg, dtype=p.dtype)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                adjoint[key] = pg if key not in adjoint else adjoint[key] + pg


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and append its adjoint to the tape when needed.

    ``backward`` maps the output adjoint to a sequence of parent adjoints
    (``None`` for parents that need none).
    """
    out = Tensor(data, dtype=data.dtype if np.issubdtype(data.dtype, np.floating) else None)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _state.dtype
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = as_tensor(a, ref.dtype)
    b = as_tensor(b, ref.dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")
    if a.shape != b.shape:
        # scalar side collapses to 0-d so the result takes the tensor's shape
        if a.size == 1 and (b.size != 1 or a.ndim <= b.ndim):
            a_view = a.data.reshape(())
            return a, b, a_view, b.data
        return a, b, a.data, b.data.reshape(())
    return a, b, a.data, b.data


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b, x, y = _binary_operands(a, b)
    return record(x + y, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b, x, y = _binary_operands(a, b)
    return record(x - y, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b, x, y = _binary_operands(a, b)

    def backward(g):
        ga = _unbroadcast(g * y, a) if a.requires_grad else None
        gb = _unbroadcast(g * x, b) if b.requires_grad else None
        return ga, gb

    return record(x * y, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the whole adjoint to the first operand."""
    a, b, x, y = _binary_operands(a, b)
    pick_a = x >= y

    def backward(g):
        return _unbroadcast(g * pick_a, a), _unbroadcast(g * ~pick_a, b)

    return record(np.maximum(x, y), (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.dtype.type(0))
    return record(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "max": maximum}


def elementwise(kind: str, a, b=None, constant: float | None = None) -> Tensor:
    """Dispatch one of the supported elementwise kinds by name."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](as_tensor(a))
    if kind == "scale":
        if constant is None:
            raise TypeError("scale needs a constant")
        return scale(as_tensor(a), constant)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ y.T if a.requires_grad else None
        gb = x.T @ g if b.requires_grad else None
        return ga, gb

    return record(x @ y, (a, b), backward)


def _normalize_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``); axes are dropped."""
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    x = a.data
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1

    if kind == "sum":
        out = x.sum(axis=axes)
        return record(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), x.shape).copy(),))
    if kind == "mean":
        out = x.sum(axis=axes) / x.dtype.type(count)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept) / x.dtype.type(count), x.shape).copy(),)

        return record(out, (a,), backward)
    if kind == "max":
        if x.size == 0:
            raise ShapeError("max over an empty tensor")
        out = x.max(axis=axes)
        # adjoint goes to the first maximizer in row-major order
        moved = np.moveaxis(x, axes, tuple(range(x.ndim - len(axes), x.ndim)))
        flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,))
        first = flat.argmax(axis=-1)

        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, first[..., None], g.reshape(first.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.moveaxis(gmoved, tuple(range(x.ndim - len(axes), x.ndim)), axes),)

        return record(out, (a,), backward)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the adjoint sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)
    expanded = tuple(i for i in range(len(shape)) if i < lead or src[i - lead] == 1 and shape[i] != 1)

    def backward(g):
        return (g.sum(axis=expanded).reshape(src) if expanded else g,)

    return record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return [np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return record(out, tensors, backward)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` with an integer index array (gather)."""
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if index.ndim else g)
        return (full,)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# fused numerically sensitive ops
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), backward)


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    x = a.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)

    def backward(g):
        return (g * np.where(small, x / beta, np.sign(x)),)

    return record(out.astype(x.dtype), (a,), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
