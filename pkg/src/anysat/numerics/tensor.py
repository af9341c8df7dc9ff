"""Dense float64 tensors with reverse-mode differentiation.

Every op records the tensors it consumed and a closure that maps the output
gradient to input gradients. ``backward`` walks the recorded graph in reverse
topological order and accumulates into leaf ``.grad`` arrays.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeMismatchError(ValueError):
    """Raised when input shapes are invalid for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AxisOutOfRangeError(ValueError):
    def __init__(self, op: str, axis: int, ndim: int):
        self.op, self.axis, self.ndim = op, axis, ndim
        super().__init__(f"{op}: axis {axis} out of range for tensor of rank {ndim}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(data, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Record an op with a user-supplied backward.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    return _make(np.asarray(data, dtype=np.float64), [as_tensor(p) for p in parents], backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRangeError(op, axis, ndim)
    return axis % ndim


def _norm_axes(op: str, axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_norm_axis(op, axis, ndim),)
    return tuple(_norm_axis(op, a, ndim) for a in axis)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), bw, "pow")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape, detail="inner dimensions must agree, rank >= 2")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape, detail="batch dimensions") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_norm_axis("transpose", ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, detail=f"axes {axes} are not a permutation")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatchError("broadcast_to", a.shape, shape) from None
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeMismatchError("slice", a.shape, detail=str(exc)) from None
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True) if not basic else out, (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatchError("concat", detail="no inputs")
    ax = _norm_axis("concat", axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeMismatchError("concat", *(t.shape for t in ts))
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes("sum", axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes("mean", axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, (a,), bw, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis("softmax", axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis("log_softmax", axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a, axis: int = -1, eps: float = 1e-9) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    a = as_tensor(a)
    ax = _norm_axis("layer_norm", axis, a.ndim)
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=ax, keepdims=True)
        gxm = (g * out).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), bw, "layer_norm")


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis("l2_norm", axis, a.ndim)
    nrm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * a.data / nrm,)

    out = nrm if keepdims else np.squeeze(nrm, axis=ax)
    return _make(out, (a,), bw, "l2_norm")


def normalize(a, axis: int = -1) -> Tensor:
    return div(a, l2_norm(a, axis=axis, keepdims=True))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("cosine_similarity", a, b)
    return sum_(mul(normalize(a, axis), normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------- dispatch

_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "mean": mean,
    "sum": sum_,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "l2_norm": l2_norm,
    "cosine_similarity": cosine_similarity,
}

OP_NAMES = tuple(_OPS)


def eval_op(op: str, *inputs, **kwargs) -> Tensor:
    """Evaluate a named op, e.g. ``eval_op("softmax", x, axis=0)``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {', '.join(OP_NAMES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None, grad_scale: float = 1.0) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If ``params`` is given, any of them without a gradient afterwards gets a
    zero gradient, so callers can rely on ``.grad`` being populated.
    """
    if root.data.size != 1:
        raise ShapeMismatchError("backward", root.shape, detail="root must be a scalar")
    if root.requires_grad:
        grads: dict[int, np.ndarray] = {id(root): np.full(root.shape, float(grad_scale))}
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=np.float64)
                if node.grad is None:
                    node.grad = g.reshape(node.shape)
                else:
                    node.grad = node.grad + g.reshape(node.shape)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros(p.shape)
