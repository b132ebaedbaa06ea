"""Reverse-mode differentiation over dense float64 arrays.

Every differentiable quantity is a :class:`Value` wrapping a numpy array.
Operations record their parents together with one vector-Jacobian product
per parent.  The VJPs are themselves written with :class:`Value` ops, so
running :func:`grad` with ``create_graph=True`` records the backward pass
on the tape and its outputs can be differentiated again.  That is how
normals (input gradients of the SDF) enter losses that are later
differentiated with respect to network weights.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value",
    "GraphError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "const",
    "param",
    "grad",
    "backward",
    "input_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reduce_sum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "concat",
    "take_cols",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "absolute",
    "sigmoid",
    "softplus",
    "relu",
    "minimum",
    "norm_rows",
]


class GraphError(ValueError):
    """Raised when a differentiation request violates the tape contract."""


_state = threading.local()
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: ops executed inside record nothing."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Value:
    """A node on the tape.

    ``data`` is always a float64 ndarray.  Leaves created with
    ``requires_grad=True`` are parameters or differentiable inputs.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjps", "op", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Value, ...] = ()
        self.vjps: tuple[Callable[[Value], Value], ...] = ()
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Value:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Value:
        return Value(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op!r}{tag})"

    # arithmetic sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def const(data) -> Value:
    return Value(data)


def param(data, name: str | None = None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, op: str, parents: tuple, vjps: tuple) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.op = op
    out.id = next(_ids)
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjps = vjps
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjps = ()
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def sum_to(x: Value, shape: tuple[int, ...]) -> Value:
    """Sum a broadcast array back down to ``shape`` (inverse of broadcasting)."""
    if x.shape == tuple(shape):
        return x
    data = x.data
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    src_shape = x.shape
    return _make(data, "sum_to", (x,), (lambda g: broadcast_to(g, src_shape),))


def broadcast_to(x: Value, shape: tuple[int, ...]) -> Value:
    if x.shape == tuple(shape):
        return x
    src_shape = x.shape
    data = np.broadcast_to(x.data, shape)
    return _make(data, "broadcast", (x,), (lambda g: sum_to(g, src_shape),))


def reshape(x: Value, shape) -> Value:
    src_shape = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), (lambda g: reshape(g, src_shape),))


def transpose(x: Value) -> Value:
    if x.ndim != 2:
        raise GraphError("transpose expects a 2-d value")
    return _make(x.data.T, "transpose", (x,), (lambda g: transpose(g),))


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [_lift(v) for v in values]
    data = np.concatenate([v.data for v in values], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def piece(lo, hi):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            return _getitem(g, tuple(idx))

        return vjp

    vjps = tuple(piece(bounds[i], bounds[i + 1]) for i in range(len(values)))
    return _make(data, "concat", tuple(values), vjps)


def _getitem(x: Value, idx) -> Value:
    src_shape = x.shape
    return _make(x.data[idx], "getitem", (x,), (lambda g: _scatter(g, idx, src_shape),))


def take_cols(x: Value, lo: int, hi: int) -> Value:
    return _getitem(x, (slice(None), slice(lo, hi)))


def _scatter(g: Value, idx, shape) -> Value:
    data = np.zeros(shape)
    data[idx] = g.data
    return _make(data, "scatter", (g,), (lambda h: _getitem(h, idx),))


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, reduced back in the VJP)


def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        (lambda g: sum_to(g, sa), lambda g: sum_to(g, sb)),
    )


def sub(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        (lambda g: sum_to(g, sa), lambda g: neg(sum_to(g, sb))),
    )


def neg(a) -> Value:
    a = _lift(a)
    return _make(-a.data, "neg", (a,), (lambda g: neg(g),))


def mul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        (lambda g: sum_to(mul(g, b), sa), lambda g: sum_to(mul(g, a), sb)),
    )


def div(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data / b.data,
        "div",
        (a, b),
        (
            lambda g: sum_to(div(g, b), sa),
            lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), sb),
        ),
    )


def power(a, p: float) -> Value:
    a = _lift(a)
    if isinstance(p, Value):
        raise GraphError("power only supports constant exponents")
    p = float(p)
    if p == 1.0:
        return a
    return _make(a.data**p, "pow", (a,), (lambda g: mul(g, mul(p, power(a, p - 1.0))),))


def matmul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise GraphError("matmul expects 2-d operands")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
    )


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = _lift(x)
    src_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(src_shape))

    def vjp(g):
        return broadcast_to(reshape(g, kept), src_shape)

    return _make(np.asarray(data, dtype=np.float64), "sum", (x,), (vjp,))


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = _lift(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / max(n, 1))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(x) -> Value:
    x = _lift(x)
    data = np.exp(x.data)
    return _make(data, "exp", (x,), (lambda g: mul(g, exp(x)),))


def log(x) -> Value:
    x = _lift(x)
    return _make(np.log(x.data), "log", (x,), (lambda g: div(g, x),))


def sin(x) -> Value:
    x = _lift(x)
    return _make(np.sin(x.data), "sin", (x,), (lambda g: mul(g, cos(x)),))


def cos(x) -> Value:
    x = _lift(x)
    return _make(np.cos(x.data), "cos", (x,), (lambda g: neg(mul(g, sin(x))),))


_SQRT_FLOOR = 1e-300


def sqrt(x) -> Value:
    """Square root whose derivative is clamped (finite) at zero."""
    x = _lift(x)
    return _make(np.sqrt(x.data), "sqrt", (x,),
                 (lambda g: div(mul(g, 0.5), _clamp_min(sqrt(x), _SQRT_FLOOR)),))


def _clamp_min(x: Value, floor: float) -> Value:
    live = Value((x.data > floor).astype(np.float64))
    return _make(np.maximum(x.data, floor), "clamp_min", (x,), (lambda g: mul(g, live),))


def absolute(x) -> Value:
    x = _lift(x)
    sign = Value(np.sign(x.data))
    return _make(np.abs(x.data), "abs", (x,), (lambda g: mul(g, sign),))


def _expit(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def sigmoid(x, _data: np.ndarray | None = None) -> Value:
    x = _lift(x)
    data = _expit(x.data) if _data is None else _data

    def vjp(g):
        s = sigmoid(x, _data=data)
        return mul(g, mul(s, sub(1.0, s)))

    return _make(data, "sigmoid", (x,), (vjp,))


def softplus(x, beta: float = 1.0) -> Value:
    """``log(1 + exp(beta x)) / beta``; smooth with nonzero second derivative."""
    x = _lift(x)
    z = beta * x.data
    e = np.exp(-np.abs(z))
    data = (np.maximum(z, 0.0) + np.log1p(e)) / beta
    r = 1.0 / (1.0 + e)
    s = np.where(z >= 0, r, e * r)

    def vjp(g):
        if x.requires_grad and is_grad_enabled():
            return mul(g, sigmoid(mul(x, beta), _data=s))
        return mul(g, Value(s))

    return _make(data, "softplus", (x,), (vjp,))


def relu(x) -> Value:
    x = _lift(x)
    live = Value((x.data > 0).astype(np.float64))
    return _make(x.data * live.data, "relu", (x,), (lambda g: mul(g, live),))


def minimum(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    ma = Value(pick_a.astype(np.float64))
    mb = Value((~pick_a).astype(np.float64))
    return _make(
        np.minimum(a.data, b.data),
        "minimum",
        (a, b),
        (lambda g: sum_to(mul(g, ma), sa), lambda g: sum_to(mul(g, mb), sb)),
    )


def norm_rows(x: Value) -> Value:
    """Euclidean norm of each row, shape ``(n, 1)``."""
    return sqrt(reduce_sum(mul(x, x), axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# differentiation


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Value,
    inputs: Sequence[Value],
    grad_output: Value | None = None,
    create_graph: bool = False,
) -> list[Value]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs need not be leaves; the result for a node is the total derivative
    through that node only.  Inputs the output does not depend on receive
    zeros.  With ``create_graph`` the returned values are on the tape.
    """
    if grad_output is None:
        if output.size != 1:
            raise GraphError(f"grad of non-scalar output with shape {output.shape}")
        grad_output = Value(np.ones(output.shape))
    targets = {v.id for v in inputs}
    results: dict[int, Value] = {}
    if output.requires_grad:
        order = _toposort(output)
        relevant: set[int] = set()
        for node in order:
            if node.id in targets or any(p.id in relevant for p in node.parents):
                relevant.add(node.id)
        grads: dict[int, Value] = {output.id: grad_output}
        with _grad_mode(create_graph):
            for node in reversed(order):
                if node.id not in relevant:
                    continue
                g = grads.pop(node.id, None)
                if g is None:
                    continue
                if node.id in targets:
                    results[node.id] = g
                for p, vjp in zip(node.parents, node.vjps):
                    if p.id not in relevant:
                        continue
                    contrib = vjp(g)
                    prev = grads.get(p.id)
                    grads[p.id] = contrib if prev is None else add(prev, contrib)
    elif output.id in targets:
        results[output.id] = grad_output
    out = []
    for v in inputs:
        g = results.get(v.id)
        if g is None:
            g = Value(np.zeros(v.shape))
        elif g.shape != v.shape:
            g = _make(np.broadcast_to(g.data, v.shape).copy(), "broadcast", (g,),
                      (lambda h, s=g.shape: sum_to(h, s),))
        out.append(g)
    return out


def backward(loss: Value, params: Iterable[Value]) -> dict[Value, np.ndarray]:
    """dLoss/dParam for each parameter, as plain arrays keyed by parameter."""
    params = list(params)
    if not isinstance(loss, Value) or loss.size != 1:
        raise GraphError("backward requires a scalar loss")
    grads = grad(loss, params)
    return {p: g.data.reshape(p.shape).copy() for p, g in zip(params, grads)}


def input_gradient(f_out: Value, x_in: Value, create_graph: bool = True) -> Value:
    """Spatial gradient of a scalar (usually a batch sum) w.r.t. ``x_in``.

    The result stays on the tape so it can be used inside a loss.
    """
    if not x_in.requires_grad:
        raise GraphError("x_in is not on the tape (create it with requires_grad=True)")
    if f_out.size != 1:
        raise GraphError("input_gradient expects a scalar output; sum a batch first")
    (g,) = grad(f_out, [x_in], create_graph=create_graph)
    return g
