"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Graph` is an append-only tape. Every forward op appends a node holding its
kind, parent ids and cached value; `backward(root)` walks the tape in reverse
id order, so evaluation order and gradient accumulation are deterministic.
One graph belongs to one thread.
"""

import logging
import typing
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from .errors import ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

Index = typing.Union[int, slice, tuple]

OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "sum",
    "mean",
    "concat",
    "slice",
    "broadcast_row",
    "reshape",
    "log_softmax",
)


@dataclass
class Parameter:
    """A named, persistent array that graphs bind as a leaf."""

    name: str
    value: np.ndarray
    frozen: bool = False

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    aux: typing.Any = None
    requires_grad: bool = True


class Tensor:
    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, kind={self.graph.nodes[self.id].kind}, shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return self.graph.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.graph.sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return self.graph.div(self, other)

    def __neg__(self) -> "Tensor":
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.graph.matmul(self, other)

    def __getitem__(self, index: Index) -> "Tensor":
        return self.graph.slice(self, index)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _require_same(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _require_positive(kind: str, x: np.ndarray) -> None:
    if not np.all(x > 0):
        raise DomainError(f"{kind}: input must be strictly positive (min={np.min(x)!r})")


# Forward rules: (values, aux) -> value. Shape checks live here.
def _fwd_matmul(vals, aux):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _fwd_binary(kind):
    def fwd(vals, aux):
        a, b = vals
        _require_same(kind, a, b)
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        if kind == "mul":
            return a * b
        if np.any(b == 0):
            raise DomainError("div: zero denominator")
        return a / b

    return fwd


def _fwd_log(vals, aux):
    _require_positive("log", vals[0])
    return np.log(vals[0])


def _fwd_sqrt(vals, aux):
    _require_positive("sqrt", vals[0])
    return np.sqrt(vals[0])


def _fwd_sum(vals, aux):
    return np.sum(vals[0], axis=aux)


def _fwd_mean(vals, aux):
    return np.mean(vals[0], axis=aux)


def _fwd_concat(vals, aux):
    head = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.shape[:-1] != head:
            raise ShapeError(f"concat: shape mismatch {vals[0].shape} vs {v.shape}")
    return np.concatenate(vals, axis=-1)


def _fwd_slice(vals, aux):
    return np.array(vals[0][aux], dtype=np.float64)


def _fwd_broadcast_row(vals, aux):
    return np.broadcast_to(vals[0], (aux,) + vals[0].shape).copy()


def _fwd_reshape(vals, aux):
    x = vals[0]
    if int(np.prod(aux)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {aux}")
    return x.reshape(aux)


def _fwd_log_softmax(vals, aux):
    return log_softmax(vals[0], axis=-1)


_FORWARD: dict[str, typing.Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_binary("add"),
    "sub": _fwd_binary("sub"),
    "mul": _fwd_binary("mul"),
    "div": _fwd_binary("div"),
    "scale": lambda vals, aux: vals[0] * aux,
    "relu": lambda vals, aux: np.maximum(vals[0], 0.0),
    "softplus": lambda vals, aux: _softplus(vals[0]),
    "exp": lambda vals, aux: np.exp(vals[0]),
    "log": _fwd_log,
    "square": lambda vals, aux: vals[0] * vals[0],
    "sqrt": _fwd_sqrt,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "broadcast_row": _fwd_broadcast_row,
    "reshape": _fwd_reshape,
    "log_softmax": _fwd_log_softmax,
}


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# Vector-Jacobian products: (parent values, node value, aux, upstream grad) -> parent grads.
def _vjp_concat(vals, out, aux, g):
    bounds = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


def _vjp_slice(vals, out, aux, g):
    # basic indexing only, so no index repeats
    full = np.zeros_like(vals[0])
    full[aux] += g
    return (full,)


def _vjp_mean(vals, out, aux, g):
    x = vals[0]
    count = x.size if aux is None else x.shape[aux]
    return (_expand_reduced(g, x.shape, aux) / count,)


def _vjp_log_softmax(vals, out, aux, g):
    soft = np.exp(out)
    return (g - soft * np.sum(g, axis=-1, keepdims=True),)


_VJP: dict[str, typing.Callable] = {
    "matmul": lambda vals, out, aux, g: (g @ vals[1].T, vals[0].T @ g),
    "add": lambda vals, out, aux, g: (g, g),
    "sub": lambda vals, out, aux, g: (g, -g),
    "mul": lambda vals, out, aux, g: (g * vals[1], g * vals[0]),
    "div": lambda vals, out, aux, g: (g / vals[1], -g * vals[0] / (vals[1] * vals[1])),
    "scale": lambda vals, out, aux, g: (g * aux,),
    # relu'(0) := 0
    "relu": lambda vals, out, aux, g: (g * (vals[0] > 0),),
    "softplus": lambda vals, out, aux, g: (g * expit(vals[0]),),
    "exp": lambda vals, out, aux, g: (g * out,),
    "log": lambda vals, out, aux, g: (g / vals[0],),
    "square": lambda vals, out, aux, g: (2.0 * vals[0] * g,),
    "sqrt": lambda vals, out, aux, g: (g / (2.0 * out),),
    "sum": lambda vals, out, aux, g: (_expand_reduced(g, vals[0].shape, aux).copy(),),
    "mean": _vjp_mean,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "broadcast_row": lambda vals, out, aux, g: (np.sum(g, axis=0),),
    "reshape": lambda vals, out, aux, g: (g.reshape(vals[0].shape),),
    "log_softmax": _vjp_log_softmax,
}


def _op_cost(kind: str, vals: list[np.ndarray], out: np.ndarray) -> int:
    if kind == "matmul":
        m, n = vals[0].shape
        return m * n * vals[1].shape[1]
    if kind in ("add", "relu", "softplus"):
        return int(out.size)
    return 0


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    op_count: int = 0
    _grads: list[np.ndarray | None] = field(default_factory=list)
    _grad_root: int | None = None
    _params: dict[int, tuple[Parameter, int]] = field(default_factory=dict)

    def _append(self, kind: str, parents: tuple[int, ...], value: np.ndarray, aux=None, requires_grad=True) -> Tensor:
        self.nodes.append(Node(kind, parents, value, aux, requires_grad))
        self._grad_root = None
        return Tensor(self, len(self.nodes) - 1)

    # --- leaves ---

    def leaf(self, array: typing.Any) -> Tensor:
        return self._append("leaf", (), np.array(array, dtype=np.float64))

    def constant(self, array: typing.Any) -> Tensor:
        return self._append("constant", (), np.array(array, dtype=np.float64), requires_grad=False)

    def detach(self, t: Tensor) -> Tensor:
        return self.constant(t.value)

    def param(self, p: Parameter) -> Tensor:
        bound = self._params.get(id(p))
        if bound is not None:
            return Tensor(self, bound[1])
        t = self.leaf(p.value)
        self._params[id(p)] = (p, t.id)
        return t

    # --- forward ---

    def apply(self, kind: str, *inputs: Tensor, aux: typing.Any = None) -> Tensor:
        """Generic forward_op: evaluate `kind` on `inputs` and record the node."""
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind: {kind}")
        for t in inputs:
            if t.graph is not self:
                raise ContractError(f"{kind}: input tensor belongs to another graph")
        vals = [self.nodes[t.id].value for t in inputs]
        out = np.asarray(_FORWARD[kind](vals, aux), dtype=np.float64)
        self.op_count += _op_cost(kind, vals, out)
        requires_grad = any(self.nodes[t.id].requires_grad for t in inputs)
        return self._append(kind, tuple(t.id for t in inputs), out, aux, requires_grad)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("matmul", a, b)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", a, b)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("sub", a, b)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("mul", a, b)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("div", a, b)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.apply("scale", a, aux=float(factor))

    def relu(self, a: Tensor) -> Tensor:
        return self.apply("relu", a)

    def softplus(self, a: Tensor) -> Tensor:
        return self.apply("softplus", a)

    def exp(self, a: Tensor) -> Tensor:
        return self.apply("exp", a)

    def log(self, a: Tensor) -> Tensor:
        return self.apply("log", a)

    def square(self, a: Tensor) -> Tensor:
        return self.apply("square", a)

    def sqrt(self, a: Tensor) -> Tensor:
        return self.apply("sqrt", a)

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        return self.apply("sum", a, aux=axis)

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        return self.apply("mean", a, aux=axis)

    def concat(self, tensors: typing.Sequence[Tensor]) -> Tensor:
        return self.apply("concat", *tensors)

    def slice(self, a: Tensor, index: Index) -> Tensor:
        return self.apply("slice", a, aux=index)

    def broadcast_row(self, a: Tensor, rows: int) -> Tensor:
        return self.apply("broadcast_row", a, aux=int(rows))

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        return self.apply("reshape", a, aux=tuple(shape))

    def log_softmax(self, a: Tensor) -> Tensor:
        return self.apply("log_softmax", a)

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
        out = self.matmul(x, weight)
        if bias is None:
            return out
        return self.add(out, self.broadcast_row(bias, x.shape[0]))

    # --- backward ---

    def backward(self, root: Tensor) -> None:
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.id] = np.ones_like(root.value)
        for idx in range(root.id, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or not node.parents or not node.requires_grad:
                continue
            vals = [self.nodes[p].value for p in node.parents]
            for parent, pg in zip(node.parents, _VJP[node.kind](vals, node.value, node.aux, g)):
                if not self.nodes[parent].requires_grad:
                    continue
                grads[parent] = pg.copy() if grads[parent] is None else grads[parent] + pg
        self._grads = grads
        self._grad_root = root.id

    def grad_wrt(self, root: Tensor, leaf: Tensor) -> np.ndarray:
        if self._grad_root != root.id:
            self.backward(root)
        g = self._grads[leaf.id]
        if g is None:
            return np.zeros_like(leaf.value)
        return g

    def parameter_grads(self, root: Tensor) -> list[tuple[Parameter, np.ndarray]]:
        if self._grad_root != root.id:
            self.backward(root)
        out = []
        for p, node_id in self._params.values():
            g = self._grads[node_id]
            out.append((p, np.zeros_like(p.value) if g is None else g))
        return out


def numeric_gradient(fn: typing.Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)
