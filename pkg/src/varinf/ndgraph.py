"""Dense tensors and a computational graph with reverse-mode differentiation.

Tensors are float64 numpy arrays. A :class:`Graph` stores nodes in creation
order, which is also a valid topological order because an operation can only
reference nodes that already exist.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

Tensor = np.ndarray

INPUT = "input"
PARAMETER = "parameter"
OPERATION = "operation"
PLACEHOLDER = "stochastic-placeholder"


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError):
    pass


class UnboundInputError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class BackwardError(GraphError):
    pass


_graph_ids = itertools.count()


@dataclass(frozen=True)
class NodeId:
    """Handle to a node; only valid for the graph that issued it."""

    index: int
    graph_id: int

    def __repr__(self) -> str:
        return f"NodeId({self.index})"


@dataclass
class Node:
    kind: str
    shape: Tuple[int, ...]
    op: Optional[str] = None
    parents: Tuple[NodeId, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None
    init: Optional[Tensor] = None
    value: Optional[Tensor] = None
    adjoint: Optional[Tensor] = None


def as_tensor(x, shape: Optional[Sequence[int]] = None) -> Tensor:
    t = np.array(x, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if t.shape != shape:
            if t.size != int(np.prod(shape)):
                raise ShapeError(f"value of shape {t.shape} does not fit shape {shape}")
            t = t.reshape(shape)
    return t


# ---------------------------------------------------------------------------
# operation registry
# ---------------------------------------------------------------------------


def _row_broadcast(tag: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    # Equal shapes, or a row vector ([n] or [1 x n]) against an [m x n] matrix.
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        if len(big) == 2 and small in ((big[1],), (1, big[1])):
            return big
    raise ShapeError(f"{tag}: incompatible shapes {list(a)} and {list(b)}")


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _require_2d(tag: str, *shapes: Tuple[int, ...]) -> None:
    for s in shapes:
        if len(s) != 2:
            raise ShapeError(f"{tag}: expected a 2-d operand, got shape {list(s)}")


def _matmul_shape(tag, a, b):
    _require_2d(tag, a, b)
    if a[1] != b[0]:
        raise ShapeError(f"{tag}: incompatible shapes {list(a)} and {list(b)}")
    return (a[0], b[1])


def _affine_shape(tag, x, w, b):
    _require_2d(tag, x, w)
    if x[1] != w[1] or b not in ((w[0],), (1, w[0])):
        raise ShapeError(f"{tag}: incompatible shapes {list(x)}, {list(w)} and {list(b)}")
    return (x[0], w[0])


def _transpose_shape(tag, a):
    _require_2d(tag, a)
    return (a[1], a[0])


def _same_shape(tag, a):
    return a


def _scalar_shape(tag, a):
    return (1,)


def _relu_grad(g, x, out):
    # subgradient 0 at the kink
    return (g * (x > 0),)


@dataclass(frozen=True)
class OpDef:
    arity: int
    shape: Callable
    forward: Callable
    backward: Callable  # (g, *parent_values, out, **attrs) -> tuple of parent adjoints


OPS: Dict[str, OpDef] = {
    "add": OpDef(
        2,
        _row_broadcast,
        lambda a, b: a + b,
        lambda g, a, b, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    ),
    "sub": OpDef(
        2,
        _row_broadcast,
        lambda a, b: a - b,
        lambda g, a, b, out: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    ),
    "mul": OpDef(
        2,
        _row_broadcast,
        lambda a, b: a * b,
        lambda g, a, b, out: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "matmul": OpDef(
        2,
        _matmul_shape,
        lambda a, b: a @ b,
        lambda g, a, b, out: (g @ b.T, a.T @ g),
    ),
    "affine": OpDef(
        3,
        _affine_shape,
        lambda x, w, b: x @ w.T + b.reshape(-1),
        lambda g, x, w, b, out: (g @ w, g.T @ x, g.sum(axis=0).reshape(b.shape)),
    ),
    "scalar_mul": OpDef(
        1,
        _same_shape,
        lambda a, c: c * a,
        lambda g, a, out, c: (c * g,),
    ),
    "neg": OpDef(1, _same_shape, lambda a: -a, lambda g, a, out: (-g,)),
    "relu": OpDef(1, _same_shape, lambda a: np.maximum(a, 0.0), _relu_grad),
    "exp": OpDef(1, _same_shape, np.exp, lambda g, a, out: (g * out,)),
    "log": OpDef(1, _same_shape, np.log, lambda g, a, out: (g / a,)),
    "square": OpDef(1, _same_shape, np.square, lambda g, a, out: (2.0 * a * g,)),
    "sum": OpDef(
        1,
        _scalar_shape,
        lambda a: np.array([a.sum()]),
        lambda g, a, out: (np.full(a.shape, g[0]),),
    ),
    "mean": OpDef(
        1,
        _scalar_shape,
        lambda a: np.array([a.mean()]),
        lambda g, a, out: (np.full(a.shape, g[0] / a.size),),
    ),
    "transpose": OpDef(1, _transpose_shape, lambda a: a.T.copy(), lambda g, a, out: (g.T,)),
}

OP_TAGS = tuple(OPS)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Graph:
    """A directed acyclic graph of inputs, parameters and operations."""

    def __init__(self) -> None:
        self.id = next(_graph_ids)
        self.nodes: List[Node] = []
        self._forward_done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, nid: NodeId) -> Node:
        self._check(nid)
        return self.nodes[nid.index]

    def _check(self, nid: NodeId) -> None:
        if not isinstance(nid, NodeId) or nid.graph_id != self.id:
            raise GraphError(f"{nid!r} does not belong to this graph")

    def _add(self, node: Node) -> NodeId:
        if any(s <= 0 for s in node.shape):
            raise ShapeError(f"shape extents must be positive, got {list(node.shape)}")
        self.nodes.append(node)
        self._forward_done = False
        return NodeId(len(self.nodes) - 1, self.id)

    def shape(self, nid: NodeId) -> Tuple[int, ...]:
        return self.node(nid).shape

    # -- construction -------------------------------------------------------

    def add_input(self, shape: Sequence[int], name: Optional[str] = None, value=None) -> NodeId:
        """Add an input node. ``value`` makes it a constant that needs no binding."""
        shape = tuple(int(s) for s in shape)
        init = None if value is None else as_tensor(value, shape)
        return self._add(Node(INPUT, shape, name=name, init=init))

    def add_constant(self, value, name: Optional[str] = None) -> NodeId:
        value = as_tensor(value)
        return self.add_input(value.shape, name=name, value=value)

    def add_parameter(self, shape: Sequence[int], init, name: Optional[str] = None) -> NodeId:
        shape = tuple(int(s) for s in shape)
        return self._add(Node(PARAMETER, shape, name=name, init=as_tensor(init, shape)))

    def add_placeholder(self, shape: Sequence[int], name: Optional[str] = None) -> NodeId:
        shape = tuple(int(s) for s in shape)
        return self._add(Node(PLACEHOLDER, shape, name=name))

    def apply(self, tag: str, *parents: NodeId, **attrs) -> NodeId:
        if tag not in OPS:
            raise GraphError(f"unknown operation {tag!r}")
        op = OPS[tag]
        if len(parents) != op.arity:
            raise GraphError(f"{tag}: expected {op.arity} operands, got {len(parents)}")
        if tag == "scalar_mul" and set(attrs) != {"c"}:
            raise GraphError("scalar_mul requires the constant c")
        for p in parents:
            self._check(p)
        shape = op.shape(tag, *(self.nodes[p.index].shape for p in parents))
        if tag == "scalar_mul":
            attrs = {"c": float(attrs["c"])}
        return self._add(Node(OPERATION, shape, op=tag, parents=tuple(parents), attrs=attrs))

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> List[NodeId]:
        return [NodeId(i, self.id) for i, n in enumerate(self.nodes) if n.kind == PARAMETER]

    def get_value(self, nid: NodeId) -> Tensor:
        node = self.node(nid)
        if node.kind == OPERATION:
            if node.value is None:
                raise GraphError("forward has not been run")
            return node.value
        return node.init

    def set_value(self, nid: NodeId, value) -> None:
        node = self.node(nid)
        if node.kind not in (PARAMETER, INPUT):
            raise GraphError("only parameters and inputs hold stored values")
        node.init = as_tensor(value, node.shape)
        self._forward_done = False

    # -- evaluation ---------------------------------------------------------

    def forward(self, bindings: Optional[Mapping[NodeId, Tensor]] = None) -> Dict[NodeId, Tensor]:
        """Evaluate every node in topological order and return all values."""
        bindings = dict(bindings or {})
        for nid in bindings:
            self._check(nid)
        out: Dict[NodeId, Tensor] = {}
        for i, node in enumerate(self.nodes):
            nid = NodeId(i, self.id)
            if node.kind == OPERATION:
                args = [self.nodes[p.index].value for p in node.parents]
                with np.errstate(all="ignore"):
                    value = OPS[node.op].forward(*args, **node.attrs)
                if not np.all(np.isfinite(value)):
                    self._forward_done = False
                    raise NonFiniteError(f"non-finite value at node {i} ({node.op})")
            elif nid in bindings:
                value = as_tensor(bindings[nid], node.shape)
            elif node.init is not None and node.kind != PLACEHOLDER:
                value = node.init
            else:
                self._forward_done = False
                label = node.name or str(i)
                raise UnboundInputError(f"unbound input: node {label}")
            node.value = value
            node.adjoint = None
            out[nid] = value
        self._forward_done = True
        return out

    def backward(self, output: NodeId, wrt: Iterable[NodeId] = ()) -> Dict[NodeId, Tensor]:
        """Adjoints of a scalar ``output`` for every parameter node.

        Extra nodes listed in ``wrt`` (inputs, placeholders or intermediates)
        are included in the returned mapping as well.
        """
        self._check(output)
        if not self._forward_done:
            raise BackwardError("forward has not been run")
        out_node = self.nodes[output.index]
        if out_node.value.size != 1:
            raise BackwardError(f"output must be scalar, got shape {list(out_node.shape)}")
        for node in self.nodes:
            node.adjoint = None
        out_node.adjoint = np.ones(out_node.shape)
        for i in range(output.index, -1, -1):
            node = self.nodes[i]
            if node.kind != OPERATION or node.adjoint is None:
                continue
            parent_vals = [self.nodes[p.index].value for p in node.parents]
            grads = OPS[node.op].backward(node.adjoint, *parent_vals, node.value, **node.attrs)
            for p, g in zip(node.parents, grads):
                pn = self.nodes[p.index]
                pn.adjoint = g if pn.adjoint is None else pn.adjoint + g
        result: Dict[NodeId, Tensor] = {}
        wanted = list(self.parameters()) + [w for w in wrt]
        for nid in wanted:
            self._check(nid)
            adj = self.nodes[nid.index].adjoint
            result[nid] = np.zeros(self.nodes[nid.index].shape) if adj is None else adj
        return result


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic adjoints against central differences.

    ``max_rel_error`` uses ``|analytic - numeric| / max(1, |analytic|, |numeric|)``
    so entries with tiny gradients are judged on absolute error.
    """

    max_rel_error: float
    passed: bool
    n_checked: int
    skipped: List[Tuple[int, str]] = field(default_factory=list)


def _relu_inputs(graph: Graph) -> List[int]:
    return [n.parents[0].index for n in graph.nodes if n.kind == OPERATION and n.op == "relu"]


def grad_check(
    graph: Graph,
    output: NodeId,
    node: NodeId,
    bindings: Optional[Mapping[NodeId, Tensor]] = None,
    step: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    bindings = dict(bindings or {})
    target = graph.node(node)
    bound = node in bindings
    base = (bindings[node] if bound else graph.get_value(node)).astype(np.float64).copy()
    base = base.reshape(target.shape)

    def evaluate(value):
        if bound:
            b = dict(bindings)
            b[node] = value
            vals = graph.forward(b)
        else:
            graph.set_value(node, value)
            vals = graph.forward(bindings)
        relus = {i: vals[NodeId(i, graph.id)].copy() for i in _relu_inputs(graph)}
        return float(vals[output][0]) if vals[output].size == 1 else None, relus

    try:
        f0, relu0 = evaluate(base)
        if f0 is None:
            raise BackwardError("output must be scalar")
        analytic = graph.backward(output, wrt=[node])[node]
        worst = 0.0
        skipped: List[Tuple[int, str]] = []
        checked = 0
        for j in range(base.size):
            plus = base.copy()
            plus.flat[j] += step
            minus = base.copy()
            minus.flat[j] -= step
            fp, relup = evaluate(plus)
            fm, relum = evaluate(minus)
            kink = any(np.any(np.sign(relup[i]) != np.sign(relum[i])) for i in relu0)
            if kink:
                skipped.append((j, "nondifferentiable point, skipped"))
                continue
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic.flat[j])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            checked += 1
    finally:
        if not bound:
            graph.set_value(node, base)
        graph.forward(bindings)
    return GradCheckReport(worst, worst < tol, checked, skipped)
