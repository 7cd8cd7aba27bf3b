"""Reverse-mode differentiation over dense 2-D float64 matrices.

A :class:`Tape` records primitive operations in execution order. Every value is
a 2-D array; a ``(1, 1)`` operand broadcasts against any shape in elementwise
ops. The module-level functions (:func:`matmul`, :func:`exp`, ...) record onto
the tape of whichever operand is a :class:`Var`. When no operand is a ``Var``
they evaluate eagerly and return a plain ``ndarray``, so the same model code
serves both the differentiable training path and cheap prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

__all__ = [
    "Tape", "Var", "ShapeError", "NotPositiveDefiniteError", "NonFiniteError",
    "GradTable", "record", "backward", "grad_check",
    "add", "sub", "mul", "matmul", "transpose", "exp", "log", "sqrt",
    "sum_all", "trace", "cholesky", "trisolve", "log_sigmoid", "sigmoid",
    "clamp_min", "value_of",
]


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"only rank-2 values are supported, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# primitives: shape rule, forward, vector-Jacobian product


def _is_scalar(shape) -> bool:
    return shape == (1, 1)


def _ew_shape(name, a, b):
    if a == b or _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    raise ShapeError(f"{name}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array([[g.sum()]])


def _matmul_shape(name, a, b):
    if a[1] != b[0]:
        raise ShapeError(f"{name}: inner dimensions differ, {a} @ {b}")
    return (a[0], b[1])


def _square_shape(name, a):
    if a[0] != a[1]:
        raise ShapeError(f"{name}: expected a square matrix, got {a}")
    return a


def _same_shape(name, a):
    return a


def _to_scalar(name, a):
    return (1, 1)


def _chol_forward(a):
    sym = 0.5 * (a + a.T)
    if not np.all(np.isfinite(sym)):
        raise NotPositiveDefiniteError("cholesky: input contains non-finite entries")
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"cholesky: matrix is not positive definite ({exc})") from None


def _phi(a):
    # lower triangle with halved diagonal
    out = np.tril(a)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _chol_vjp(g, out, a):
    L = out
    P = _phi(L.T @ np.tril(g))
    S = 0.5 * (P + P.T)
    # L^{-T} S L^{-1}
    tmp = scipy.linalg.solve_triangular(L, S, trans="T", lower=True)
    sbar = scipy.linalg.solve_triangular(L, tmp.T, trans="T", lower=True).T
    return (0.5 * (sbar + sbar.T),)


def _trisolve_forward(L, B, transpose=False):
    return scipy.linalg.solve_triangular(L, B, lower=True, trans="T" if transpose else "N",
                                         check_finite=False)


def _trisolve_vjp(g, out, L, B, transpose=False):
    if transpose:
        bbar = scipy.linalg.solve_triangular(L, g, lower=True, trans="N", check_finite=False)
        lbar = -np.tril(out @ bbar.T)
    else:
        bbar = scipy.linalg.solve_triangular(L, g, lower=True, trans="T", check_finite=False)
        lbar = -np.tril(bbar @ out.T)
    return lbar, bbar


def _sqrt_vjp(g, out, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(out > 0, 0.5 / out, 0.0)
    return (g * d,)


@dataclass(frozen=True)
class Primitive:
    shape: Callable
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(
        lambda n, a, b: _ew_shape(n, a, b),
        lambda a, b: a + b,
        lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    ),
    "sub": Primitive(
        lambda n, a, b: _ew_shape(n, a, b),
        lambda a, b: a - b,
        lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    ),
    "mul": Primitive(
        lambda n, a, b: _ew_shape(n, a, b),
        lambda a, b: a * b,
        lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "matmul": Primitive(
        _matmul_shape,
        lambda a, b: a @ b,
        lambda g, out, a, b: (g @ b.T, a.T @ g),
    ),
    "transpose": Primitive(
        lambda n, a: (a[1], a[0]),
        lambda a: a.T.copy(),
        lambda g, out, a: (g.T,),
    ),
    "exp": Primitive(_same_shape, np.exp, lambda g, out, a: (g * out,)),
    "log": Primitive(_same_shape, np.log, lambda g, out, a: (g / a,)),
    "sqrt": Primitive(_same_shape, np.sqrt, _sqrt_vjp),
    "sum": Primitive(
        _to_scalar,
        lambda a: np.array([[a.sum()]]),
        lambda g, out, a: (np.full(a.shape, g[0, 0]),),
    ),
    "trace": Primitive(
        lambda n, a: _to_scalar(n, _square_shape(n, a)),
        lambda a: np.array([[np.trace(a)]]),
        lambda g, out, a: (g[0, 0] * np.eye(a.shape[0]),),
    ),
    "cholesky": Primitive(_square_shape, _chol_forward, _chol_vjp),
    "trisolve": Primitive(
        lambda n, L, B: _matmul_shape(n, _square_shape(n, L), B),
        _trisolve_forward,
        _trisolve_vjp,
    ),
    "log_sigmoid": Primitive(
        _same_shape,
        lambda a: -np.logaddexp(0.0, -a),
        lambda g, out, a: (g * expit(-a),),
    ),
    "sigmoid": Primitive(_same_shape, expit, lambda g, out, a: (g * out * (1.0 - out),)),
    "clamp_min": Primitive(
        _same_shape,
        lambda a, lo=0.0: np.maximum(a, lo),
        lambda g, out, a, lo=0.0: (np.where(a > lo, g, 0.0),),
    ),
}


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str  # "leaf" or a primitive name
    operands: tuple[int, ...]
    shape: tuple[int, int]
    requires_grad: bool
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # ndarray <op> Var defers to the Var operator

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.node.shape

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return mul(self, -1.0)

    def __truediv__(self, o):
        if isinstance(o, Var):
            return mul(self, exp(mul(log(o), -1.0)))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __repr__(self):
        return f"Var(#{self.index}, op={self.node.op}, shape={self.shape})"


class Tape:
    """Ordered record of leaves and primitive applications.

    Operands always precede the nodes that use them, so replaying ``nodes``
    front to back is a valid forward evaluation and walking it backwards is
    a valid reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True, name: str | None = None) -> Var:
        v = _as_matrix(value).copy()
        self.nodes.append(Node("leaf", (), v.shape, requires_grad, name=name))
        self.values.append(v)
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.const(x)

    def record(self, op: str, operands: Sequence, **attrs) -> Var:
        prim = PRIMITIVES[op]
        vs = [self._lift(x) for x in operands]
        shape = prim.shape(op, *[v.shape for v in vs])
        out = prim.forward(*[v.value for v in vs], **attrs)
        assert out.shape == shape, (op, out.shape, shape)
        rg = any(v.requires_grad for v in vs)
        self.nodes.append(Node(op, tuple(v.index for v in vs), shape, rg, attrs))
        self.values.append(out)
        return Var(self, len(self.nodes) - 1)

    def leaves(self) -> list[Var]:
        return [Var(self, i) for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node's forward value, optionally substituting leaves."""
        leaf_values = leaf_values or {}
        vals: list[np.ndarray] = []
        for i, n in enumerate(self.nodes):
            if n.op == "leaf":
                vals.append(_as_matrix(leaf_values.get(i, self.values[i])))
            else:
                vals.append(PRIMITIVES[n.op].forward(*[vals[j] for j in n.operands], **n.attrs))
        return vals

    def backward(self, root: Var) -> "GradTable":
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.shape != (1, 1):
            raise ShapeError(f"backward: root must be 1x1, got {root.shape}")
        adj: dict[int, np.ndarray] = {root.index: np.ones((1, 1))}
        for i in range(root.index, -1, -1):
            g = adj.get(i)
            n = self.nodes[i]
            if g is None or n.op == "leaf" or not n.requires_grad:
                continue
            ins = [self.values[j] for j in n.operands]
            grads = PRIMITIVES[n.op].vjp(g, self.values[i], *ins, **n.attrs)
            for j, gj in zip(n.operands, grads):
                if not self.nodes[j].requires_grad:
                    continue
                if j in adj:
                    adj[j] = adj[j] + gj
                else:
                    adj[j] = gj
        table = {}
        for i, n in enumerate(self.nodes[: root.index + 1]):
            if n.op == "leaf" and n.requires_grad:
                table[i] = adj.get(i, np.zeros(n.shape))
        return GradTable(table)


class GradTable:
    """Adjoints of the requires-grad leaves, indexable by ``Var``."""

    def __init__(self, by_index: dict[int, np.ndarray]):
        self.by_index = by_index

    def __getitem__(self, v: Var) -> np.ndarray:
        return self.by_index[v.index]

    def __contains__(self, v: Var) -> bool:
        return v.index in self.by_index

    def __len__(self):
        return len(self.by_index)


# ---------------------------------------------------------------------------
# functional front end


def _find_tape(operands) -> Tape | None:
    for x in operands:
        if isinstance(x, Var):
            return x.tape
    return None


def record(op: str, operands: Sequence, **attrs):
    tape = _find_tape(operands)
    if tape is not None:
        return tape.record(op, operands, **attrs)
    prim = PRIMITIVES[op]
    vals = [_as_matrix(x) for x in operands]
    prim.shape(op, *[v.shape for v in vals])
    return prim.forward(*vals, **attrs)


def backward(tape: Tape, root: Var) -> GradTable:
    return tape.backward(root)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_matrix(x)


def add(a, b): return record("add", (a, b))
def sub(a, b): return record("sub", (a, b))
def mul(a, b): return record("mul", (a, b))
def matmul(a, b): return record("matmul", (a, b))
def transpose(a): return record("transpose", (a,))
def exp(a): return record("exp", (a,))
def log(a): return record("log", (a,))
def sqrt(a): return record("sqrt", (a,))
def sum_all(a): return record("sum", (a,))
def trace(a): return record("trace", (a,))
def cholesky(a): return record("cholesky", (a,))
def log_sigmoid(a): return record("log_sigmoid", (a,))
def sigmoid(a): return record("sigmoid", (a,))


def trisolve(L, B, transpose: bool = False):
    """Solve ``L X = B`` (or ``L^T X = B``) for lower-triangular ``L``."""
    return record("trisolve", (L, B), transpose=transpose)


def clamp_min(a, lo: float = 0.0):
    return record("clamp_min", (a,), lo=lo)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(
    f: Callable[[list], object],
    theta: np.ndarray | Sequence[np.ndarray],
    h: float = 1e-5,
    frozen: Iterable[bool | np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of parameter blocks (``Var`` or ``ndarray``) to a 1x1
    value. ``frozen`` gives, per block, a bool or a boolean mask of
    coordinates that are held fixed and skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(theta, np.ndarray)
    blocks = [_as_matrix(theta)] if single else [_as_matrix(t) for t in theta]
    if frozen is None:
        masks = [np.zeros(b.shape, dtype=bool) for b in blocks]
    else:
        fr = [frozen] if single else list(frozen)
        masks = [np.broadcast_to(np.asarray(m, dtype=bool), b.shape) for m, b in zip(fr, blocks)]

    tape = Tape()
    leaves = [tape.leaf(b, requires_grad=not m.all()) for b, m in zip(blocks, masks)]
    root = f(leaves)
    grads = tape.backward(root) if isinstance(root, Var) and root.requires_grad else None

    def evaluate(bs):
        v = value_of(f(bs))[0, 0]
        return v

    worst = 0.0
    for k, (b, m) in enumerate(zip(blocks, masks)):
        analytic = grads[leaves[k]] if grads is not None and leaves[k] in grads else np.zeros(b.shape)
        for idx in np.ndindex(*b.shape):
            if m[idx]:
                continue
            plus = [x.copy() for x in blocks]
            minus = [x.copy() for x in blocks]
            plus[k][idx] += h
            minus[k][idx] -= h
            fp, fm = evaluate(plus), evaluate(minus)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value at block {k}, coordinate {idx}")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
    return worst
