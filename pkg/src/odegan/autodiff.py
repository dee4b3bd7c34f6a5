"""Small reverse-mode differentiation engine over float64 numpy arrays.

Expressions are immutable graph nodes built with the helper constructors
(``inp``, ``const``, ``add``, ``matmul``, ...) or the arithmetic operators.
Backward passes are themselves built as expression graphs, so a gradient can
be differentiated again (double backprop). Graph programs are compiled once
and cached, which keeps repeated evaluation with new bindings cheap.

Only scalar-vs-array broadcasting is supported. A bias row can be added to a
batch with ``matmul(ones_column, bias_row)``.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12
HESSIAN_MAX_DIM = 512

_ids = itertools.count()


class AutodiffError(ValueError):
    pass


class UnboundInputError(AutodiffError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class DimensionGuardError(AutodiffError):
    pass


# Public node kinds, plus three helper kinds that only appear in backward graphs:
# transpose, relu_mask (derivative of relu/leaky_relu) and log_deriv (derivative
# of the clamped log).
KINDS = frozenset(
    {
        "input", "constant", "add", "sub", "mul", "matmul", "sum", "mean",
        "square", "relu", "leaky_relu", "sigmoid", "log", "exp", "neg",
        "transpose", "relu_mask", "log_deriv",
    }
)


class Expr:
    """A node in an acyclic expression graph."""

    __slots__ = ("kind", "operands", "shape", "name", "value", "param", "id", "__weakref__")

    def __init__(self, kind, operands=(), shape=(), name=None, value=None, param=None):
        if kind not in KINDS:
            raise AutodiffError(f"unknown node kind {kind!r}")
        self.kind = kind
        self.operands = tuple(operands)
        self.shape = tuple(int(s) for s in shape)
        self.name = name
        self.value = value
        self.param = param
        self.id = next(_ids)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __repr__(self):
        label = self.name if self.kind == "input" else self.kind
        return f"Expr({label}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


# --------------------------------------------------------------------------- constructors


def inp(name: str, shape: Sequence[int] = ()) -> Expr:
    return Expr("input", (), shape, name=name)


def const(value) -> Expr:
    arr = np.asarray(value, dtype=np.float64)
    arr.setflags(write=False)
    return Expr("constant", (), arr.shape, value=arr)


def _wrap(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def _broadcast_shape(kind, a: Expr, b: Expr):
    if a.shape == b.shape:
        return a.shape
    if a.shape == ():
        return b.shape
    if b.shape == ():
        return a.shape
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    return Expr("add", (a, b), _broadcast_shape("add", a, b))


def sub(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    return Expr("sub", (a, b), _broadcast_shape("sub", a, b))


def mul(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    return Expr("mul", (a, b), _broadcast_shape("mul", a, b))


def matmul(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Expr("matmul", (a, b), (a.shape[0], b.shape[1]))


def transpose(a) -> Expr:
    a = _wrap(a)
    if len(a.shape) != 2:
        raise ShapeError(f"transpose needs a 2-d operand, got {a.shape}")
    return Expr("transpose", (a,), a.shape[::-1])


def _unary(kind, a, param=None) -> Expr:
    a = _wrap(a)
    return Expr(kind, (a,), a.shape, param=param)


def esum(a) -> Expr:
    return Expr("sum", (_wrap(a),), ())


def mean(a) -> Expr:
    return Expr("mean", (_wrap(a),), ())


def square(a) -> Expr:
    return _unary("square", a)


def relu(a) -> Expr:
    return _unary("relu", a)


def leaky_relu(a, slope: float = 0.2) -> Expr:
    return _unary("leaky_relu", a, float(slope))


def sigmoid(a) -> Expr:
    return _unary("sigmoid", a)


def log(a) -> Expr:
    """Natural log with the argument clamped to at least ``LOG_FLOOR``."""
    return _unary("log", a)


def exp(a) -> Expr:
    return _unary("exp", a)


def neg(a) -> Expr:
    return _unary("neg", a)


# --------------------------------------------------------------------------- forward


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(node: Expr, args):
    k = node.kind
    if k == "add":
        return args[0] + args[1]
    if k == "sub":
        return args[0] - args[1]
    if k == "mul":
        return args[0] * args[1]
    if k == "matmul":
        return args[0] @ args[1]
    if k == "transpose":
        return args[0].T
    if k == "sum":
        return np.asarray(args[0].sum())
    if k == "mean":
        return np.asarray(args[0].mean())
    if k == "square":
        return args[0] * args[0]
    if k == "relu":
        return np.where(args[0] > 0, args[0], 0.0)
    if k == "leaky_relu":
        return np.where(args[0] > 0, args[0], node.param * args[0])
    if k == "relu_mask":
        return np.where(args[0] > 0, 1.0, node.param)
    if k == "sigmoid":
        return _sigmoid(np.asarray(args[0], dtype=np.float64))
    if k == "log":
        return np.log(np.maximum(args[0], LOG_FLOOR))
    if k == "log_deriv":
        x = args[0]
        return np.where(x >= LOG_FLOOR, 1.0 / np.maximum(x, LOG_FLOOR), 0.0)
    if k == "exp":
        return np.exp(args[0])
    if k == "neg":
        return -args[0]
    raise AutodiffError(f"cannot evaluate node kind {k!r}")


def _toposort(outputs: Sequence[Expr]) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    for out in outputs:
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if node.id in seen:
                continue
            if expanded:
                seen.add(node.id)
                order.append(node)
                continue
            stack.append((node, True))
            for op in reversed(node.operands):
                if op.id not in seen:
                    stack.append((op, False))
    return order


_program_cache: dict[tuple[int, ...], tuple[list[Expr], list[Expr]]] = {}


def _program(outputs: Sequence[Expr]):
    key = tuple(o.id for o in outputs)
    prog = _program_cache.get(key)
    if prog is None:
        order = _toposort(outputs)
        prog = (order, list(outputs))
        _program_cache[key] = prog
    return prog[0]


def _node_path(node: Expr, values) -> str:
    parts = []
    cur = node
    while cur is not None:
        parts.append(cur.name if cur.kind == "input" else cur.kind)
        nxt = None
        for op in cur.operands:
            v = values.get(op.id)
            if v is not None and not np.all(np.isfinite(v)):
                nxt = op
                break
        cur = nxt
    return " <- ".join(parts)


def _lookup(bindings: Mapping, node: Expr):
    if node.name in bindings:
        return bindings[node.name]
    if node in bindings:
        return bindings[node]
    raise UnboundInputError(f"input {node.name!r} is not bound")


def evaluate_many(outputs: Sequence[Expr], bindings: Mapping, check_finite: bool = True) -> list[np.ndarray]:
    """Evaluate several expressions sharing one forward pass.

    Finiteness is checked on the outputs; when one fails, the first non-finite
    intermediate is located and reported with its path to the inputs.
    """
    order = _program(outputs)
    values: dict[int, np.ndarray] = {}
    # overflow is reported below as NonFiniteError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in order:
            if node.kind == "input":
                arr = np.asarray(_lookup(bindings, node), dtype=np.float64)
                if arr.shape != node.shape:
                    raise ShapeError(f"input {node.name!r} bound with shape {arr.shape}, expected {node.shape}")
                values[node.id] = arr
            elif node.kind == "constant":
                values[node.id] = node.value
            else:
                values[node.id] = _forward(node, [values[op.id] for op in node.operands])
    results = [np.asarray(values[o.id]) for o in outputs]
    if check_finite and not all(np.isfinite(r).all() for r in results):
        for node in order:
            if not np.isfinite(values[node.id]).all():
                raise NonFiniteError(f"non-finite value at {_node_path(node, values)}")
        raise NonFiniteError("non-finite output")
    return results


def evaluate(expr: Expr, bindings: Mapping) -> np.ndarray:
    return evaluate_many([expr], bindings)[0]


def inputs_of(expr: Expr) -> list[Expr]:
    return [n for n in _toposort([expr]) if n.kind == "input"]


# --------------------------------------------------------------------------- backward graphs


def _reduce_to(grad: Expr, shape) -> Expr:
    # scalar operand broadcast against an array: its adjoint is the sum
    if grad.shape == tuple(shape):
        return grad
    if tuple(shape) == ():
        return esum(grad)
    raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _vjp(node: Expr, g: Expr) -> list[Expr | None]:
    k = node.kind
    ops = node.operands
    if k == "add":
        return [_reduce_to(g, ops[0].shape), _reduce_to(g, ops[1].shape)]
    if k == "sub":
        return [_reduce_to(g, ops[0].shape), _reduce_to(neg(g), ops[1].shape)]
    if k == "mul":
        a, b = ops
        return [_reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)]
    if k == "matmul":
        a, b = ops
        return [matmul(g, transpose(b)), matmul(transpose(a), g)]
    if k == "transpose":
        return [transpose(g)]
    if k == "sum":
        return [mul(g, const(np.ones(ops[0].shape)))]
    if k == "mean":
        n = ops[0].size
        return [mul(g, const(np.full(ops[0].shape, 1.0 / n)))]
    if k == "square":
        return [mul(mul(g, ops[0]), 2.0)]
    if k == "relu":
        return [mul(g, Expr("relu_mask", (ops[0],), ops[0].shape, param=0.0))]
    if k == "leaky_relu":
        return [mul(g, Expr("relu_mask", (ops[0],), ops[0].shape, param=node.param))]
    if k == "sigmoid":
        return [mul(g, mul(node, sub(1.0, node)))]
    if k == "log":
        return [mul(g, Expr("log_deriv", (ops[0],), ops[0].shape))]
    if k == "log_deriv":
        # d/dx (1/x) = -(1/x)^2 on the unclamped branch, zero below the floor
        return [mul(g, neg(square(node)))]
    if k == "exp":
        return [mul(g, node)]
    if k == "neg":
        return [neg(g)]
    if k == "relu_mask":
        return [None]
    return [None] * len(ops)


_grad_cache: dict[tuple[int, tuple[int, ...]], list[Expr]] = {}


def grad_exprs(expr: Expr, wrt: Sequence[Expr]) -> list[Expr]:
    """Build (and cache) expression graphs for d expr / d w for each w in ``wrt``."""
    if expr.shape != ():
        raise ShapeError(f"gradient needs a scalar expression, got shape {expr.shape}")
    wrt = list(wrt)
    key = (expr.id, tuple(w.id for w in wrt))
    cached = _grad_cache.get(key)
    if cached is not None:
        return cached
    order = _toposort([expr])
    adj: dict[int, list[Expr]] = {expr.id: [const(1.0)]}
    total: dict[int, Expr] = {}
    for node in reversed(order):
        parts = adj.pop(node.id, None)
        if not parts:
            continue
        g = parts[0]
        for p in parts[1:]:
            g = add(g, p)
        total[node.id] = g
        if node.kind in ("input", "constant"):
            continue
        for op, og in zip(node.operands, _vjp(node, g)):
            if og is not None and op.kind != "constant":
                adj.setdefault(op.id, []).append(og)
    out = []
    for w in wrt:
        if w.kind != "input":
            raise AutodiffError("gradients are taken with respect to input nodes only")
        out.append(total.get(w.id, const(np.zeros(w.shape))))
    _grad_cache[key] = out
    return out


def _as_inputs(expr: Expr, names) -> list[Expr]:
    table = {n.name: n for n in inputs_of(expr)}
    result = []
    for w in names:
        if isinstance(w, Expr):
            result.append(w)
        elif w in table:
            result.append(table[w])
        else:
            # input not reached by expr: its derivative is identically zero
            raise UnboundInputError(f"{w!r} is not an input of the expression; pass the Expr node instead")
    return result


def _check_grads(names, arrays):
    for n, a in zip(names, arrays):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite gradient for input {n!r}")


def gradient(expr: Expr, bindings: Mapping, wrt: Iterable) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of a scalar expression."""
    nodes = _as_inputs(expr, list(wrt))
    gexprs = grad_exprs(expr, nodes)
    arrays = evaluate_many(gexprs, bindings)
    arrays = [np.broadcast_to(a, n.shape).copy() if a.shape != n.shape else a for a, n in zip(arrays, nodes)]
    names = [n.name for n in nodes]
    _check_grads(names, arrays)
    return dict(zip(names, arrays))


def grad_norm_sq_expr(expr: Expr, inner: Sequence[Expr]) -> Expr:
    """Expression for ||d expr / d inner||^2 (summed over all inner inputs)."""
    gs = grad_exprs(expr, inner)
    total = esum(square(gs[0]))
    for g in gs[1:]:
        total = add(total, esum(square(g)))
    return total


_norm_cache: dict[tuple[int, tuple[int, ...]], Expr] = {}


def grad_of_grad_norm(expr: Expr, bindings: Mapping, inner: Iterable, outer: Iterable) -> dict[str, np.ndarray]:
    """Return grad_outer ||grad_inner expr||^2 by differentiating the backward graph."""
    inner_nodes = _as_inputs(expr, list(inner))
    outer_nodes = _as_inputs(expr, list(outer))
    if {n.id for n in inner_nodes} & {n.id for n in outer_nodes}:
        raise AutodiffError("inner and outer input sets must be disjoint")
    key = (expr.id, tuple(n.id for n in inner_nodes))
    norm = _norm_cache.get(key)
    if norm is None:
        norm = _norm_cache[key] = grad_norm_sq_expr(expr, inner_nodes)
    return gradient(norm, bindings, outer_nodes)


# --------------------------------------------------------------------------- second order


def _flat_size(nodes) -> int:
    return sum(n.size for n in nodes)


def _split(vec: np.ndarray, nodes) -> list[np.ndarray]:
    out, i = [], 0
    for n in nodes:
        out.append(vec[i:i + n.size].reshape(n.shape))
        i += n.size
    return out


_hvp_cache: dict[tuple, tuple[list[Expr], list[Expr]]] = {}


def mixed_hessian(expr: Expr, bindings: Mapping, rows: Iterable, cols: Iterable) -> np.ndarray:
    """Dense matrix M[i, j] = d^2 expr / d rows_i d cols_j.

    Each column block is one reverse pass through the gradient graph contracted
    with a unit probe vector, so the cost is ``len(rows)`` backward evaluations.
    """
    row_nodes = _as_inputs(expr, list(rows))
    col_nodes = _as_inputs(expr, list(cols))
    nr, nc = _flat_size(row_nodes), _flat_size(col_nodes)
    if max(nr, nc) > HESSIAN_MAX_DIM:
        raise DimensionGuardError(f"dense Hessian of size {nr}x{nc} exceeds guard {HESSIAN_MAX_DIM}")
    key = (expr.id, tuple(n.id for n in row_nodes), tuple(n.id for n in col_nodes))
    cached = _hvp_cache.get(key)
    if cached is None:
        gs = grad_exprs(expr, row_nodes)
        probes = [inp(f"__probe{i}_{n.id}", n.shape) for i, n in enumerate(row_nodes)]
        contracted = esum(mul(gs[0], probes[0]))
        for g, p in zip(gs[1:], probes[1:]):
            contracted = add(contracted, esum(mul(g, p)))
        cached = (probes, grad_exprs(contracted, col_nodes))
        _hvp_cache[key] = cached
    probes, hv = cached
    out = np.zeros((nr, nc))
    local = dict(bindings)
    for i in range(nr):
        e = np.zeros(nr)
        e[i] = 1.0
        for p, part in zip(probes, _split(e, row_nodes)):
            local[p.name] = part
        cols_i = evaluate_many(hv, local)
        out[i] = np.concatenate([np.broadcast_to(c, n.shape).ravel() for c, n in zip(cols_i, col_nodes)])
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite Hessian entry")
    return out


def hessian(expr: Expr, bindings: Mapping, wrt) -> np.ndarray:
    """Dense Hessian over one input or the concatenation of several."""
    nodes = [wrt] if isinstance(wrt, (Expr, str)) else list(wrt)
    return mixed_hessian(expr, bindings, nodes, nodes)
