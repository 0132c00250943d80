"""Reverse-mode automatic differentiation on an append-only tape.

Values are real scalars (Python floats) or dense 1-D float64 vectors.
Every operation records one node; a single reverse sweep over the tape
computes gradients of a scalar output with respect to any recorded
leaves.  Non-finite results are rejected at record time so that a
diverging computation fails at the operation that produced it, not
somewhere downstream.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "NonFiniteOperationError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "log_sigmoid",
    "dot",
    "vsum",
    "scale",
    "affine",
    "clip",
    "gradient",
    "check_gradient",
]


class NonFiniteOperationError(ArithmeticError):
    """An operation produced NaN or infinity."""


def _describe(value) -> str:
    if isinstance(value, float):
        return repr(value)
    v = np.asarray(value)
    return "array(len=%d, min=%s, max=%s)" % (v.size, v.min(), v.max())


class Var:
    """Handle to one tape node; carries the node's primal value."""

    __slots__ = ("tape", "nid", "value")

    def __init__(self, tape: "Tape", nid: int, value):
        self.tape = tape
        self.nid = nid
        self.value = value

    # Operator sugar.  Non-Var operands become constant leaves.
    def __add__(self, other):
        return add(self, _as_var(self.tape, other))

    def __radd__(self, other):
        return add(_as_var(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _as_var(self.tape, other))

    def __rsub__(self, other):
        return sub(_as_var(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _as_var(self.tape, other))

    def __rmul__(self, other):
        return mul(_as_var(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _as_var(self.tape, other))

    def __rtruediv__(self, other):
        return div(_as_var(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return "Var(nid=%d, value=%s)" % (self.nid, _describe(self.value))


class Tape:
    """Append-only record of operations.

    Each node is a tuple ``(kind, input_ids, value, aux)``.  Nodes are
    never mutated or removed, so node ids are topologically ordered and
    a reverse id sweep visits consumers before producers.
    """

    __slots__ = ("nodes", "last_sweep_visits")

    def __init__(self):
        self.nodes: list = []
        self.last_sweep_visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Var:
        """Record an input node (parameter or constant)."""
        if isinstance(value, Var):
            raise TypeError("leaf() takes a plain value, not a Var")
        if np.isscalar(value) or isinstance(value, (int, float)):
            v = float(value)
            if not math.isfinite(v):
                raise NonFiniteOperationError("non-finite leaf value: %r" % v)
        else:
            v = np.array(value, dtype=np.float64)
            if v.ndim != 1:
                raise ValueError("vector leaves must be 1-D, got shape %s" % (v.shape,))
            if not np.isfinite(v).all():
                raise NonFiniteOperationError(
                    "non-finite leaf value: %s" % _describe(v)
                )
        return self._record("leaf", (), v, None)

    def _record(self, kind: str, input_ids: tuple, value, aux) -> Var:
        nid = len(self.nodes)
        self.nodes.append((kind, input_ids, value, aux))
        return Var(self, nid, value)


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.leaf(x)


def _check_tapes(a: Var, b: Var) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("operands recorded on different tapes")
    return a.tape


def _finite_or_raise(kind: str, value, inputs):
    if isinstance(value, float):
        if math.isfinite(value):
            return value
    elif np.isfinite(value).all():
        return value
    raise NonFiniteOperationError(
        "non-finite result in op '%s'; inputs: %s"
        % (kind, ", ".join(_describe(v.value) for v in inputs))
    )


def _record_binary(kind: str, a: Var, b: Var, value) -> Var:
    tape = _check_tapes(a, b)
    _finite_or_raise(kind, value, (a, b))
    return tape._record(kind, (a.nid, b.nid), value, None)


def _record_unary(kind: str, a: Var, value, aux=None) -> Var:
    _finite_or_raise(kind, value, (a,))
    return a.tape._record(kind, (a.nid,), value, aux)


# --- arithmetic; scalars broadcast against vectors -------------------------


def add(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if type(av) is float and type(bv) is float:
        return _record_binary("add", a, b, av + bv)
    return _record_binary("add", a, b, np.add(av, bv))


def sub(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if type(av) is float and type(bv) is float:
        return _record_binary("sub", a, b, av - bv)
    return _record_binary("sub", a, b, np.subtract(av, bv))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if type(av) is float and type(bv) is float:
        return _record_binary("mul", a, b, av * bv)
    return _record_binary("mul", a, b, np.multiply(av, bv))


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if type(av) is float and type(bv) is float:
        value = av / bv if bv != 0.0 else math.inf
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.divide(av, bv)
    return _record_binary("div", a, b, value)


def neg(a: Var) -> Var:
    av = a.value
    return _record_unary("neg", a, -av if type(av) is float else np.negative(av))


def exp(a: Var) -> Var:
    av = a.value
    if type(av) is float:
        try:
            value = math.exp(av)
        except OverflowError:
            value = math.inf
    else:
        with np.errstate(over="ignore"):
            value = np.exp(av)
    return _record_unary("exp", a, value)


def log(a: Var) -> Var:
    av = a.value
    if type(av) is float:
        value = math.log(av) if av > 0.0 else math.nan
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.log(av)
    return _record_unary("log", a, value)


def sqrt(a: Var) -> Var:
    av = a.value
    if type(av) is float:
        value = math.sqrt(av) if av >= 0.0 else math.nan
    else:
        with np.errstate(invalid="ignore"):
            value = np.sqrt(av)
    return _record_unary("sqrt", a, value)


def square(a: Var) -> Var:
    av = a.value
    return _record_unary("square", a, av * av)


def sigmoid(a: Var) -> Var:
    av = a.value
    if type(av) is float:
        if av >= 0.0:
            value = 1.0 / (1.0 + math.exp(-av))
        else:
            e = math.exp(av)
            value = e / (1.0 + e)
    else:
        value = np.exp(-np.logaddexp(0.0, -av))
    return _record_unary("sigmoid", a, value)


def log_sigmoid(a: Var) -> Var:
    # -log(1 + exp(-x)) with the large-|x| branch handled by logaddexp.
    av = a.value
    if type(av) is float:
        if av >= 0.0:
            value = -math.log1p(math.exp(-av))
        else:
            value = av - math.log1p(math.exp(av))
    else:
        value = -np.logaddexp(0.0, -av)
    return _record_unary("log_sigmoid", a, value)


# --- reductions and linear maps --------------------------------------------


def dot(a: Var, b: Var) -> Var:
    tape = _check_tapes(a, b)
    av, bv = a.value, b.value
    if type(av) is float or type(bv) is float:
        raise TypeError("dot() requires two vectors")
    if av.shape != bv.shape:
        raise ValueError("dot() length mismatch: %d vs %d" % (av.size, bv.size))
    value = float(np.dot(av, bv))
    _finite_or_raise("dot", value, (a, b))
    return tape._record("dot", (a.nid, b.nid), value, None)


def vsum(a: Var) -> Var:
    if type(a.value) is float:
        raise TypeError("sum() requires a vector")
    value = float(np.sum(a.value))
    return _record_unary("sum", a, value)


def scale(c: Var, v: Var) -> Var:
    tape = _check_tapes(c, v)
    if type(c.value) is not float or type(v.value) is float:
        raise TypeError("scale() takes (scalar, vector)")
    value = c.value * v.value
    _finite_or_raise("scale", value, (c, v))
    return tape._record("scale", (c.nid, v.nid), value, None)


def affine(w: Var, x: Var, b: Var | None, rows: int, cols: int) -> Var:
    """Matrix-vector product with optional offset: reshape(w, (rows, cols)) @ x + b.

    The matrix is carried as a flat length rows*cols vector so that tape
    values stay 1-D.
    """
    tape = _check_tapes(w, x)
    wv, xv = w.value, x.value
    if type(wv) is float or type(xv) is float:
        raise TypeError("affine() requires vector operands")
    if wv.size != rows * cols:
        raise ValueError("affine() weight length %d != %d*%d" % (wv.size, rows, cols))
    if xv.size != cols:
        raise ValueError("affine() input length %d != cols %d" % (xv.size, cols))
    value = wv.reshape(rows, cols) @ xv
    if b is not None:
        _check_tapes(w, b)
        if type(b.value) is float or b.value.size != rows:
            raise ValueError("affine() offset must be a length-%d vector" % rows)
        value = value + b.value
        ids = (w.nid, x.nid, b.nid)
    else:
        ids = (w.nid, x.nid)
    _finite_or_raise("affine", value, (w, x) if b is None else (w, x, b))
    return tape._record("affine", ids, value, (rows, cols))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; gradient is 1 inside the interval and 0 outside."""
    if not lo <= hi:
        raise ValueError("clip() needs lo <= hi, got %r > %r" % (lo, hi))
    av = a.value
    if type(av) is float:
        value = min(max(av, lo), hi)
    else:
        value = np.clip(av, lo, hi)
    return _record_unary("clip", a, value, (float(lo), float(hi)))


# --- reverse sweep ----------------------------------------------------------


def _reduce_to(g, template):
    # Collapse a vector adjoint onto a scalar operand that was broadcast.
    if type(template) is float and type(g) is not float:
        return float(np.sum(g))
    return g


def _acc(adj: list, nid: int, g):
    cur = adj[nid]
    adj[nid] = g if cur is None else cur + g


def gradient(output: Var, wrt: Sequence[Var]) -> list:
    """Gradients of a scalar output for each Var in wrt.

    One reverse sweep over the tape; each node is visited at most once
    (the visit count is stored on ``tape.last_sweep_visits``).  Leaves
    that do not influence the output get zero gradients.
    """
    if not isinstance(output, Var):
        raise TypeError("gradient() output must be a Var")
    if type(output.value) is not float:
        raise ValueError("gradient() output must be a scalar")
    tape = output.tape
    for v in wrt:
        if not isinstance(v, Var) or v.tape is not tape:
            raise ValueError("wrt entries must be Vars on the output's tape")

    nodes = tape.nodes
    adj: list = [None] * (output.nid + 1)
    adj[output.nid] = 1.0
    visits = 0
    for nid in range(output.nid, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        visits += 1
        kind, ids, value, aux = nodes[nid]
        if kind == "leaf":
            continue
        if kind == "add":
            a, b = ids
            _acc(adj, a, _reduce_to(g, nodes[a][2]))
            _acc(adj, b, _reduce_to(g, nodes[b][2]))
        elif kind == "sub":
            a, b = ids
            _acc(adj, a, _reduce_to(g, nodes[a][2]))
            gb = -g if type(g) is float else np.negative(g)
            _acc(adj, b, _reduce_to(gb, nodes[b][2]))
        elif kind == "mul":
            a, b = ids
            av, bv = nodes[a][2], nodes[b][2]
            _acc(adj, a, _reduce_to(g * bv, av))
            _acc(adj, b, _reduce_to(g * av, bv))
        elif kind == "div":
            a, b = ids
            av, bv = nodes[a][2], nodes[b][2]
            _acc(adj, a, _reduce_to(g / bv, av))
            _acc(adj, b, _reduce_to(-g * value / bv, bv))
        elif kind == "neg":
            _acc(adj, ids[0], -g if type(g) is float else np.negative(g))
        elif kind == "exp":
            _acc(adj, ids[0], g * value)
        elif kind == "log":
            _acc(adj, ids[0], g / nodes[ids[0]][2])
        elif kind == "sqrt":
            _acc(adj, ids[0], g * 0.5 / value)
        elif kind == "square":
            _acc(adj, ids[0], g * 2.0 * nodes[ids[0]][2])
        elif kind == "sigmoid":
            if type(value) is float:
                _acc(adj, ids[0], g * value * (1.0 - value))
            else:
                _acc(adj, ids[0], g * value * (1.0 - value))
        elif kind == "log_sigmoid":
            # d/dx log sigmoid(x) = 1 - sigmoid(x) = 1 - exp(value)
            if type(value) is float:
                _acc(adj, ids[0], g * (1.0 - math.exp(value)))
            else:
                _acc(adj, ids[0], g * (1.0 - np.exp(value)))
        elif kind == "dot":
            a, b = ids
            _acc(adj, a, g * nodes[b][2])
            _acc(adj, b, g * nodes[a][2])
        elif kind == "sum":
            src = nodes[ids[0]][2]
            _acc(adj, ids[0], np.full(src.size, g))
        elif kind == "scale":
            c, v = ids
            _acc(adj, c, float(np.dot(g, nodes[v][2])))
            _acc(adj, v, nodes[c][2] * g)
        elif kind == "affine":
            rows, cols = aux
            wv = nodes[ids[0]][2]
            xv = nodes[ids[1]][2]
            _acc(adj, ids[0], np.outer(g, xv).ravel())
            _acc(adj, ids[1], wv.reshape(rows, cols).T @ g)
            if len(ids) == 3:
                _acc(adj, ids[2], g)
        elif kind == "clip":
            lo, hi = aux
            xv = nodes[ids[0]][2]
            if type(xv) is float:
                _acc(adj, ids[0], g if lo <= xv <= hi else 0.0)
            else:
                _acc(adj, ids[0], g * ((xv >= lo) & (xv <= hi)))
        else:
            raise ValueError("unknown op kind %r" % kind)
    tape.last_sweep_visits = visits

    out = []
    for v in wrt:
        g = adj[v.nid] if v.nid < len(adj) else None
        if g is None:
            g = 0.0 if type(v.value) is float else np.zeros(v.value.size)
        out.append(g)
    return out


def check_gradient(
    f: Callable[[Var], Var], x0: np.ndarray, h: float = 1e-5
) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    ``f`` maps a single vector Var to a scalar Var and is re-evaluated on
    a fresh tape for every probe.  Relative error for coordinate i is
    |ad_i - fd_i| / (|fd_i| + 1e-12).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    y = f(x)
    if not isinstance(y, Var) or type(y.value) is not float:
        raise ValueError("check_gradient() target must return a scalar Var")
    (g_ad,) = gradient(y, [x])
    g_ad = np.atleast_1d(np.asarray(g_ad, dtype=np.float64))

    def value_at(xv: np.ndarray) -> float:
        t = Tape()
        return f(t.leaf(xv)).value

    worst = 0.0
    for i in range(x0.size):
        step = np.zeros_like(x0)
        step[i] = h
        fd = (value_at(x0 + step) - value_at(x0 - step)) / (2.0 * h)
        rel = abs(g_ad[i] - fd) / (abs(fd) + 1e-12)
        if rel > worst:
            worst = rel
    return worst
