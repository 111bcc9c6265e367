"""Reverse-mode automatic differentiation over numpy float64 arrays.

A :class:`Tape` records operations eagerly: every call computes its forward
value immediately and appends a node holding the op kind, the ids of its
inputs and whatever context the reverse rule needs.  ``Tape.backward`` sweeps
the node list once in reverse order.

Every op in this module also accepts plain arrays.  When none of the operands
is a :class:`Var` the op simply returns the numpy result, so the physics and
model code can be written once and evaluated either with or without a tape.

Shape rule: operands that carry gradients must already have the output shape.
Constants (arrays, python numbers or ``Tape.const`` nodes) may broadcast.  Use
:func:`broadcast_to` to broadcast a differentiable value explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "DomainError",
    "NonScalarRoot",
    "Tape",
    "Var",
    "Gradients",
    "GradCheckReport",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "sum",
    "max0",
    "relu",
    "exp",
    "log",
    "atan2",
    "square",
    "sqrt",
    "hypot",
    "concat",
    "stack",
    "index",
    "segment_sum",
    "segment_softmax",
    "broadcast_to",
    "reshape",
    "value_of",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its domain (log/sqrt of negative, x/0)."""

    def __init__(self, op: str, node_id: int | None, detail: str = ""):
        where = "untaped" if node_id is None else f"node {node_id}"
        msg = f"{op}: domain error at {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.node_id = node_id


class NonScalarRoot(ValueError):
    """backward() was called on a non-scalar value."""


class _Node:
    __slots__ = ("op", "inputs", "value", "ctx", "requires_grad")

    def __init__(self, op, inputs, value, ctx, requires_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.requires_grad = requires_grad


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000.0

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.id].value.shape

    @property
    def ndim(self) -> int:
        return self.tape.nodes[self.id].value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        raise TypeError("use autodiff.index() for gathers")

    def sum(self, axis=None):
        return sum(self, axis)


class Tape:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, ctx=None, requires_grad=None) -> Var:
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(_Node(op, tuple(inputs), value, ctx, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        """Differentiable input (a parameter or a point being checked)."""
        return self._push("leaf", (), np.array(value, dtype=np.float64), None, True)

    def const(self, value) -> Var:
        return self._push("const", (), np.array(value, dtype=np.float64), None, False)

    def backward(self, root: Var) -> "Gradients":
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.shape != ():
            raise NonScalarRoot(f"root node {root.id} has shape {root.shape}")
        adj: list = [None] * len(self.nodes)
        adj[root.id] = np.array(1.0)
        nodes = self.nodes
        for nid in range(root.id, -1, -1):
            g = adj[nid]
            node = nodes[nid]
            if g is None or not node.requires_grad or not node.inputs:
                continue
            grads = _BACKWARD[node.op](nodes, node, g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not nodes[inp].requires_grad:
                    continue
                prev = adj[inp]
                adj[inp] = gi if prev is None else prev + gi
        return Gradients(self, adj)


class Gradients:
    """Adjoints produced by one backward sweep."""

    def __init__(self, tape: Tape, adjoints: list):
        self._tape = tape
        self._adj = adjoints

    def adjoint(self, node_id: int) -> np.ndarray:
        a = self._adj[node_id] if node_id < len(self._adj) else None
        if a is None:
            return np.zeros_like(self._tape.nodes[node_id].value)
        return np.asarray(a, dtype=np.float64).reshape(self._tape.nodes[node_id].value.shape)

    def __getitem__(self, var: Var) -> np.ndarray:
        return self.adjoint(var.id)

    def get(self, var: Var) -> np.ndarray:
        return self.adjoint(var.id)


# ---------------------------------------------------------------------------
# helpers

def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _as_input(tape: Tape, x) -> int:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x.id
    return tape.const(x).id


def _check_elementwise(op, tape, xs, out_shape):
    for x in xs:
        if isinstance(x, Var) and x.requires_grad and x.shape != out_shape:
            raise ShapeMismatch(
                f"{op}: differentiable operand of shape {x.shape} would broadcast to {out_shape}"
            )


def _binary(op, a, b, fwd):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    try:
        out_shape = np.broadcast_shapes(av.shape, bv.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {av.shape} and {bv.shape}") from exc
    if t is None:
        return fwd(av, bv, None)
    _check_elementwise(op, t, (a, b), out_shape)
    ia, ib = _as_input(t, a), _as_input(t, b)
    return t._push(op, (ia, ib), fwd(av, bv, len(t.nodes)))


def _unary(op, x, fwd, ctx_fn=None):
    t = _tape_of(x)
    xv = value_of(x)
    if t is None:
        return fwd(xv, None)
    out = fwd(xv, len(t.nodes))
    return t._push(op, (x.id,), out, ctx_fn(xv, out) if ctx_fn else None)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    return _binary("add", a, b, lambda x, y, _: x + y)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y, _: x - y)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y, _: x * y)


def div(a, b):
    def fwd(x, y, nid):
        if np.any(y == 0):
            raise DomainError("div", nid, "division by zero")
        return x / y

    return _binary("div", a, b, fwd)


def neg(x):
    return _unary("neg", x, lambda v, _: -v)


def max0(x):
    return _unary("max0", x, lambda v, _: np.maximum(v, 0.0))


def relu(x):
    return _unary("relu", x, lambda v, _: np.maximum(v, 0.0))


def exp(x):
    return _unary("exp", x, lambda v, _: np.exp(v))


def log(x):
    def fwd(v, nid):
        if np.any(v <= 0):
            raise DomainError("log", nid, "non-positive argument")
        return np.log(v)

    return _unary("log", x, fwd)


def square(x):
    return _unary("square", x, lambda v, _: v * v)


def sqrt(x):
    def fwd(v, nid):
        if np.any(v < 0):
            raise DomainError("sqrt", nid, "negative argument")
        return np.sqrt(v)

    return _unary("sqrt", x, fwd)


def hypot(a, b):
    """sqrt(a**2 + b**2) with the zero subgradient at the origin."""
    return _binary("hypot", a, b, lambda x, y, _: np.sqrt(x * x + y * y))


def atan2(y, x):
    """Four-quadrant arctangent of y/x; the gradient at the origin is 0."""
    return _binary("atan2", y, x, lambda a, b, _: np.arctan2(a, b))


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b):
    """Matrix product with numpy semantics; ``b`` must be 1-D or 2-D."""
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if bv.ndim not in (1, 2) or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {av.shape} and {bv.shape}")
    out = av @ bv
    if t is None:
        return out
    return t._push("matmul", (_as_input(t, a), _as_input(t, b)), out)


def transpose(x):
    """Swap the last two axes."""
    t = _tape_of(x)
    xv = value_of(x)
    if xv.ndim < 2:
        raise ShapeMismatch(f"transpose: needs ndim >= 2, got {xv.shape}")
    out = np.swapaxes(xv, -1, -2)
    if t is None:
        return out
    return t._push("transpose", (x.id,), out)


def sum(x, axis=None):
    t = _tape_of(x)
    xv = value_of(x)
    out = np.asarray(np.sum(xv, axis=axis), dtype=np.float64)
    if t is None:
        return out
    return t._push("sum", (x.id,), out, axis)


def concat(xs: Sequence, axis: int = -1):
    t = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[v.shape for v in vals]}") from exc
    if t is None:
        return out
    ax = axis % out.ndim
    sizes = [v.shape[ax] for v in vals]
    return t._push("concat", tuple(_as_input(t, x) for x in xs), out, (ax, sizes))


def stack(xs: Sequence, axis: int = -1):
    t = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {[v.shape for v in vals]}") from exc
    if t is None:
        return out
    return t._push("stack", tuple(_as_input(t, x) for x in xs), out, axis % out.ndim)


def index(x, idx, axis: int = -1):
    """Gather ``x`` at integer positions ``idx`` along ``axis``."""
    t = _tape_of(x)
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(xv, idx, axis=axis)
    if t is None:
        return out
    return t._push("index", (x.id,), out, (idx, axis % xv.ndim))


_ONEHOT_CACHE: dict = {}


def _onehot(seg, n):
    key = (n, seg.tobytes())
    S = _ONEHOT_CACHE.get(key)
    if S is None:
        if len(_ONEHOT_CACHE) > 256:
            _ONEHOT_CACHE.clear()
        S = np.zeros((n, seg.shape[0]))
        S[seg, np.arange(seg.shape[0])] = 1.0
        _ONEHOT_CACHE[key] = S
    return S


def _scatter_add(vals, seg, n, axis):
    """Sum slices of ``vals`` along ``axis`` into ``n`` buckets (dense one-hot product)."""
    S = _onehot(seg, n)
    if axis == vals.ndim - 1:
        return vals @ S.T
    moved = np.moveaxis(vals, axis, -2)
    return np.moveaxis(S @ moved, -2, axis)


def segment_sum(x, seg, n: int, axis: int = -1):
    """Sum entries of ``x`` along ``axis`` into ``n`` buckets labelled by ``seg``."""
    t = _tape_of(x)
    xv = value_of(x)
    seg = np.asarray(seg, dtype=np.intp)
    ax = axis % xv.ndim
    if xv.shape[ax] != seg.shape[0]:
        raise ShapeMismatch(f"segment_sum: axis length {xv.shape[ax]} vs {seg.shape[0]} labels")
    out = _scatter_add(xv, seg, n, ax)
    if t is None:
        return out
    return t._push("segment_sum", (x.id,), out, (seg, ax))


def segment_softmax(x, seg, n: int, axis: int = -1):
    """Softmax of ``x`` taken separately within each segment along ``axis``."""
    t = _tape_of(x)
    xv = value_of(x)
    seg = np.asarray(seg, dtype=np.intp)
    ax = axis % xv.ndim
    if xv.shape[ax] != seg.shape[0]:
        raise ShapeMismatch(f"segment_softmax: axis length {xv.shape[ax]} vs {seg.shape[0]} labels")
    shape = list(xv.shape)
    shape[ax] = n
    mx = np.full(shape, -np.inf)
    np.maximum.at(np.moveaxis(mx, ax, 0), seg, np.moveaxis(xv, ax, 0))
    e = np.exp(xv - np.take(mx, seg, axis=ax))
    den = _scatter_add(e, seg, n, ax)
    out = e / np.take(den, seg, axis=ax)
    if t is None:
        return out
    return t._push("segment_softmax", (x.id,), out, (seg, ax, n))


def broadcast_to(x, shape):
    t = _tape_of(x)
    xv = value_of(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(xv, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast_to: {xv.shape} -> {shape}") from exc
    if t is None:
        return np.array(out)
    return t._push("broadcast_to", (x.id,), out, xv.shape)


def reshape(x, shape):
    t = _tape_of(x)
    xv = value_of(x)
    try:
        out = xv.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {xv.shape} -> {shape}") from exc
    if t is None:
        return out
    return t._push("reshape", (x.id,), out, xv.shape)


# ---------------------------------------------------------------------------
# reverse rules: each returns one adjoint (or None) per input

def _bw_add(nodes, node, g):
    return g, g


def _bw_sub(nodes, node, g):
    return g, -g


def _bw_mul(nodes, node, g):
    ia, ib = node.inputs
    ga = g * nodes[ib].value if nodes[ia].requires_grad else None
    gb = g * nodes[ia].value if nodes[ib].requires_grad else None
    return ga, gb


def _bw_div(nodes, node, g):
    ia, ib = node.inputs
    ga = g / nodes[ib].value
    gb = -ga * node.value if nodes[ib].requires_grad else None
    return ga, gb


def _bw_neg(nodes, node, g):
    return (-g,)


def _bw_relu(nodes, node, g):
    x = nodes[node.inputs[0]].value
    return (g * (x > 0),)


def _bw_exp(nodes, node, g):
    return (g * node.value,)


def _bw_log(nodes, node, g):
    return (g / nodes[node.inputs[0]].value,)


def _bw_square(nodes, node, g):
    return (2.0 * g * nodes[node.inputs[0]].value,)


def _safe_ratio(num, den):
    out = np.zeros(np.broadcast_shapes(np.shape(num), np.shape(den)))
    np.divide(num, den, out=out, where=den != 0)
    return out


def _bw_sqrt(nodes, node, g):
    return (_safe_ratio(g, 2.0 * node.value),)


def _bw_hypot(nodes, node, g):
    ia, ib = node.inputs
    r = node.value
    return _safe_ratio(g * nodes[ia].value, r), _safe_ratio(g * nodes[ib].value, r)


def _bw_atan2(nodes, node, g):
    iy, ix = node.inputs
    y, x = nodes[iy].value, nodes[ix].value
    r2 = x * x + y * y
    return _safe_ratio(g * x, r2), _safe_ratio(-g * y, r2)


def _bw_matmul(nodes, node, g):
    ia, ib = node.inputs
    a, b = nodes[ia].value, nodes[ib].value
    ga = gb = None
    if b.ndim == 2:
        if nodes[ia].requires_grad:
            ga = g @ b.T
        if nodes[ib].requires_grad:
            if a.ndim == 1:
                gb = np.outer(a, g)
            else:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
    else:
        if nodes[ia].requires_grad:
            ga = np.multiply.outer(g, b)
        if nodes[ib].requires_grad:
            gb = a.reshape(-1, a.shape[-1]).T @ np.reshape(g, -1)
    return ga, gb


def _bw_transpose(nodes, node, g):
    return (np.swapaxes(g, -1, -2),)


def _bw_sum(nodes, node, g):
    x = nodes[node.inputs[0]].value
    axis = node.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _bw_concat(nodes, node, g):
    ax, sizes = node.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _bw_stack(nodes, node, g):
    ax = node.ctx
    return tuple(np.take(g, k, axis=ax) for k in range(g.shape[ax]))


def _bw_index(nodes, node, g):
    idx, ax = node.ctx
    x = nodes[node.inputs[0]].value
    return (_scatter_add(g, idx, x.shape[ax], ax),)


def _bw_segment_sum(nodes, node, g):
    seg, ax = node.ctx
    return (np.take(g, seg, axis=ax),)


def _bw_segment_softmax(nodes, node, g):
    seg, ax, n = node.ctx
    y = node.value
    s = _scatter_add(g * y, seg, n, ax)
    return (y * (g - np.take(s, seg, axis=ax)),)


def _bw_broadcast_to(nodes, node, g):
    src = node.ctx
    lead = g.ndim - len(src)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(k for k, d in enumerate(src) if d == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


def _bw_reshape(nodes, node, g):
    return (np.reshape(g, node.ctx),)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": _bw_neg,
    "max0": _bw_relu,
    "relu": _bw_relu,
    "exp": _bw_exp,
    "log": _bw_log,
    "square": _bw_square,
    "sqrt": _bw_sqrt,
    "hypot": _bw_hypot,
    "atan2": _bw_atan2,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "sum": _bw_sum,
    "concat": _bw_concat,
    "stack": _bw_stack,
    "index": _bw_index,
    "segment_sum": _bw_segment_sum,
    "segment_softmax": _bw_segment_softmax,
    "broadcast_to": _bw_broadcast_to,
    "reshape": _bw_reshape,
}


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`.

    ``failing`` lists flat coordinates whose relative error exceeds ``tol``;
    ``kinks`` lists coordinates skipped because the one-sided differences
    disagree (the function is not differentiable there).
    """

    max_rel_error: float
    n_checked: int
    failing: list = field(default_factory=list)
    kinks: list = field(default_factory=list)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return not self.failing


def grad_check(
    f: Callable[[Tape, Var], Var],
    point,
    step=1e-6,
    tol: float = 1e-5,
    floor: float | None = None,
    kink_tol: float = 1e-3,
    coords: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` at ``point`` with central differences.

    ``f(tape, x)`` must return a scalar Var built from the leaf ``x``.  The
    relative error of a coordinate is ``|a - d| / max(|a|, |d|, floor)``.
    The default ``floor`` is the rounding noise of a central difference,
    ``64 eps max(|f|, 1) / step``, so exactly-zero gradients are judged
    against what the difference can resolve.

    ``step`` may be a sequence: each coordinate then keeps the smallest error
    over the steps at which it shows no kink, which approximates the optimal
    step between truncation and rounding error.
    """
    x0 = np.array(point, dtype=np.float64)
    steps = [float(step)] if np.isscalar(step) else [float(h) for h in step]

    def value(x):
        tape = Tape()
        return float(f(tape, tape.leaf(x)).value)

    tape = Tape()
    leaf = tape.leaf(x0)
    root = f(tape, leaf)
    grad = tape.backward(root)[leaf].ravel()
    f0 = float(root.value)
    eps = np.finfo(np.float64).eps

    flat = x0.ravel()
    report = GradCheckReport(max_rel_error=0.0, n_checked=0, tol=tol)
    for k in range(flat.size) if coords is None else coords:
        best = None
        for h in steps:
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += h
            xm[k] -= h
            fp = value(xp.reshape(x0.shape))
            fm = value(xm.reshape(x0.shape))
            fwd = (fp - f0) / h
            bwd = (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                continue
            fd = (fp - fm) / (2.0 * h)
            fl = floor if floor is not None else 64 * eps * max(abs(f0), 1.0) / h
            err = abs(grad[k] - fd) / max(abs(grad[k]), abs(fd), fl)
            best = err if best is None else min(best, err)
        if best is None:
            report.kinks.append(k)
            continue
        report.n_checked += 1
        report.max_rel_error = max(report.max_rel_error, best)
        if best > tol:
            report.failing.append(k)
    return report
