"""
mixedprefix.autodiff.graph

Tape-based reverse-mode differentiation over dense float64 arrays.

A Graph records every primitive application in execution order. Values are
computed eagerly when a node is created; `backward` walks the record in
reverse. Random masks (dropout) are stored on the node, so replaying the
record reproduces the realized forward pass exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import EmptyTargetsError, GraphError, ShapeError

IGNORE_TARGET = -1
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad, self.name)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


# ------------------------------------------------------------
# Primitives
# ------------------------------------------------------------

ForwardFn = Callable[[list[np.ndarray], dict], np.ndarray]
BackwardFn = Callable[[np.ndarray, list[np.ndarray], np.ndarray, dict], list[Optional[np.ndarray]]]
CheckFn = Callable[[list[tuple[int, ...]], dict], None]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: ForwardFn
    backward: BackwardFn
    check: Optional[CheckFn] = None


PRIMITIVES: Dict[str, Primitive] = {}


def _register(name: str, forward: ForwardFn, backward: BackwardFn, check: Optional[CheckFn] = None) -> None:
    PRIMITIVES[name] = Primitive(name, forward, backward, check)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str) -> CheckFn:
    def check(shapes, attrs):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(name, shapes, "not broadcastable") from None

    return check


_register(
    "add",
    lambda v, a: v[0] + v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    _check_broadcast("add"),
)
_register(
    "sub",
    lambda v, a: v[0] - v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
    _check_broadcast("sub"),
)
_register(
    "mul",
    lambda v, a: v[0] * v[1],
    lambda g, v, out, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
    _check_broadcast("mul"),
)
_register(
    "scale",
    lambda v, a: v[0] * a["factor"],
    lambda g, v, out, a: [g * a["factor"]],
)


def _check_matmul(shapes, attrs):
    sa, sb = shapes
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", shapes)
    try:
        np.broadcast_shapes(sa[:-2], sb[:-2])
    except ValueError:
        raise ShapeError("matmul", shapes, "batch dims not broadcastable") from None


def _matmul_backward(g, v, out, a):
    x, w = v
    gx = _unbroadcast(g @ np.swapaxes(w, -1, -2), x.shape)
    gw = _unbroadcast(np.swapaxes(x, -1, -2) @ g, w.shape)
    return [gx, gw]


_register("matmul", lambda v, a: v[0] @ v[1], _matmul_backward, _check_matmul)


def _check_embedding(shapes, attrs):
    (table,) = shapes
    ids = attrs["ids"]
    if len(table) != 2:
        raise ShapeError("embedding", shapes, "table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table[0]):
        raise ShapeError("embedding", shapes, f"ids outside [0, {table[0]})")


def _embedding_backward(g, v, out, a):
    table = v[0]
    grad = np.zeros_like(table)
    np.add.at(grad, a["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return [grad]


_register("embedding", lambda v, a: v[0][a["ids"]], _embedding_backward, _check_embedding)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


_register(
    "softmax",
    lambda v, a: _softmax(v[0], a["axis"]),
    lambda g, v, out, a: [out * (g - (g * out).sum(axis=a["axis"], keepdims=True))],
)


def _layer_norm_forward(v, a):
    x = v[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + a["eps"])


def _layer_norm_backward(g, v, out, a):
    x = v[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a["eps"])
    gx = inv * (g - g.mean(axis=-1, keepdims=True) - out * (g * out).mean(axis=-1, keepdims=True))
    return [gx]


_register("layer_norm", _layer_norm_forward, _layer_norm_backward)


def _nonlinearity_forward(v, a):
    x = v[0]
    if a["kind"] == "tanh":
        return np.tanh(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _nonlinearity_backward(g, v, out, a):
    x = v[0]
    if a["kind"] == "tanh":
        return [g * (1.0 - out**2)]
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return [g * d]


_register("nonlinearity", _nonlinearity_forward, _nonlinearity_backward)

_register(
    "dropout",
    lambda v, a: v[0] * a["mask"],
    lambda g, v, out, a: [g * a["mask"]],
)


def _check_cross_entropy(shapes, attrs):
    (logits,) = shapes
    targets = attrs["targets"]
    if len(logits) != 2 or targets.shape != (logits[0],):
        raise ShapeError("cross_entropy", [logits, targets.shape], "expects logits [N, V] and targets [N]")
    valid = targets[targets != IGNORE_TARGET]
    if valid.size and (valid.min() < 0 or valid.max() >= logits[1]):
        raise ShapeError("cross_entropy", [logits, targets.shape], "target id outside vocabulary")


def _ce_parts(logits: np.ndarray, targets: np.ndarray):
    mask = targets != IGNORE_TARGET
    count = int(mask.sum())
    if count == 0:
        raise EmptyTargetsError("cross_entropy over targets that are all padding")
    safe = np.where(mask, targets, 0)
    return mask, count, safe


def _cross_entropy_forward(v, a):
    logits = v[0]
    mask, count, safe = _ce_parts(logits, a["targets"])
    lse = logsumexp(logits, axis=-1)
    nll = lse - logits[np.arange(len(safe)), safe]
    return np.array(np.sum(nll * mask) / count)


def _cross_entropy_backward(g, v, out, a):
    logits = v[0]
    mask, count, safe = _ce_parts(logits, a["targets"])
    grad = _softmax(logits, -1)
    grad[np.arange(len(safe)), safe] -= 1.0
    grad *= mask[:, None] / count
    return [grad * g]


_register("cross_entropy", _cross_entropy_forward, _cross_entropy_backward, _check_cross_entropy)

_register(
    "l2_squared",
    lambda v, a: np.array(np.sum(v[0] * v[0])),
    lambda g, v, out, a: [2.0 * v[0] * g],
)


def _sum_backward(g, v, out, a):
    x = v[0]
    axis = a["axis"]
    if axis is None:
        return [np.broadcast_to(g, x.shape).copy()]
    if not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


_register(
    "sum",
    lambda v, a: np.array(np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])),
    _sum_backward,
)


def _check_concat(shapes, attrs):
    axis = attrs["axis"]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError("concat", shapes, f"mismatch off axis {axis}")


def _concat_backward(g, v, out, a):
    sizes = [x.shape[a["axis"]] for x in v]
    cuts = np.cumsum(sizes)[:-1]
    return list(np.split(g, cuts, axis=a["axis"]))


_register("concat", lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_backward, _check_concat)


def _slice_index(ndim: int, axis: int, start: int, stop: int) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _check_slice(shapes, attrs):
    (s,) = shapes
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not (-len(s) <= axis < len(s)) or not (0 <= start <= stop <= s[axis]):
        raise ShapeError("slice", shapes, f"axis={axis} range=[{start}, {stop})")


def _slice_backward(g, v, out, a):
    grad = np.zeros_like(v[0])
    grad[_slice_index(grad.ndim, a["axis"], a["start"], a["stop"])] = g
    return [grad]


_register(
    "slice",
    lambda v, a: v[0][_slice_index(v[0].ndim, a["axis"], a["start"], a["stop"])].copy(),
    _slice_backward,
    _check_slice,
)


def _check_transpose(shapes, attrs):
    if sorted(attrs["axes"]) != list(range(len(shapes[0]))):
        raise ShapeError("transpose", shapes, f"axes={attrs['axes']}")


_register(
    "transpose",
    lambda v, a: np.transpose(v[0], a["axes"]).copy(),
    lambda g, v, out, a: [np.transpose(g, np.argsort(a["axes"]))],
    _check_transpose,
)


def _check_reshape(shapes, attrs):
    if math.prod(shapes[0]) != math.prod(attrs["shape"]):
        raise ShapeError("reshape", [shapes[0], tuple(attrs["shape"])])


_register(
    "reshape",
    lambda v, a: v[0].reshape(a["shape"]),
    lambda g, v, out, a: [g.reshape(v[0].shape)],
    _check_reshape,
)


# ------------------------------------------------------------
# Nodes and graph
# ------------------------------------------------------------


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "value", "requires_grad", "name")

    def __init__(self, graph, index, op, inputs, attrs, value, requires_grad, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.graph.constant(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))


class Graph:
    """Ordered record of primitive applications."""

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}
        self.leaf_tensors: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # --- leaves ----------------------------------------------------------------

    def param(self, tensor: Tensor, name: Optional[str] = None) -> Node:
        """Bind a Tensor as a leaf. Binding the same Tensor twice returns the same node."""
        key = id(tensor)
        if key in self._leaves:
            return self._leaves[key]
        node = Node(
            self,
            len(self.nodes),
            "leaf",
            (),
            {},
            tensor.data,
            self.grad_enabled and tensor.requires_grad,
            name or tensor.name,
        )
        self.nodes.append(node)
        self._leaves[key] = node
        self.leaf_tensors[node.index] = tensor
        return node

    def constant(self, value: Any, name: Optional[str] = None) -> Node:
        node = Node(self, len(self.nodes), "constant", (), {}, np.array(value, dtype=np.float64), False, name)
        self.nodes.append(node)
        return node

    def stop_gradient(self, node: Node) -> Node:
        return self.constant(node.value.copy(), name=node.name)

    # --- primitive application ---------------------------------------------------

    def apply(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise GraphError(f"unknown primitive '{op}'")
        for n in inputs:
            if n.graph is not self:
                raise GraphError(f"{op}: input node belongs to another graph")
        if prim.check is not None:
            prim.check([n.shape for n in inputs], attrs)
        value = prim.forward([n.value for n in inputs], attrs)
        requires_grad = self.grad_enabled and any(n.requires_grad for n in inputs)
        node = Node(self, len(self.nodes), op, tuple(n.index for n in inputs), attrs, value, requires_grad)
        self.nodes.append(node)
        return node

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", [a, b])

    def sub(self, a: Node, b: Node) -> Node:
        return self.apply("sub", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self.apply("mul", [a, b])

    def scale(self, a: Node, factor: float) -> Node:
        return self.apply("scale", [a], factor=float(factor))

    def matmul(self, a: Node, b: Node) -> Node:
        return self.apply("matmul", [a, b])

    def embedding(self, table: Node, ids: Any) -> Node:
        return self.apply("embedding", [table], ids=np.asarray(ids, dtype=np.int64))

    def softmax(self, a: Node, axis: int = -1) -> Node:
        return self.apply("softmax", [a], axis=axis)

    def layer_norm(self, a: Node, eps: float = 1e-5) -> Node:
        return self.apply("layer_norm", [a], eps=eps)

    def nonlinearity(self, a: Node, kind: str = "gelu") -> Node:
        if kind not in ("gelu", "tanh"):
            raise GraphError(f"unsupported nonlinearity '{kind}'")
        return self.apply("nonlinearity", [a], kind=kind)

    def dropout(self, a: Node, p: float, rng: RngStream) -> Node:
        """Inverted dropout; the realized mask is stored on the node."""
        if p <= 0.0:
            return a
        if p >= 1.0:
            mask = np.zeros(a.shape)
        else:
            mask = (~rng.bernoulli(p, a.shape)).astype(np.float64) / (1.0 - p)
        return self.apply("dropout", [a], mask=mask, p=p)

    def cross_entropy(self, logits: Node, targets: Any) -> Node:
        return self.apply("cross_entropy", [logits], targets=np.asarray(targets, dtype=np.int64))

    def l2_squared(self, a: Node) -> Node:
        return self.apply("l2_squared", [a])

    def sum(self, a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
        return self.apply("sum", [a], axis=axis, keepdims=keepdims)

    def mean(self, a: Node) -> Node:
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def concat(self, nodes: Sequence[Node], axis: int = 0) -> Node:
        if len(nodes) == 1:
            return nodes[0]
        return self.apply("concat", list(nodes), axis=axis)

    def slice(self, a: Node, axis: int, start: int, stop: int) -> Node:
        return self.apply("slice", [a], axis=axis, start=int(start), stop=int(stop))

    def transpose(self, a: Node, axes: Sequence[int]) -> Node:
        return self.apply("transpose", [a], axes=tuple(axes))

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        return self.apply("reshape", [a], shape=tuple(int(s) for s in shape))

    # --- replay / backward ---------------------------------------------------------

    def replay(self, overrides: Optional[Mapping[str, np.ndarray]] = None) -> list[np.ndarray]:
        """Recompute every node from the record. Leaves read their Tensor (or an override by name)."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                tensor = self.leaf_tensors[node.index]
                values.append(np.asarray(overrides.get(node.name, tensor.data), dtype=np.float64))
            elif node.op == "constant":
                values.append(node.value)
            else:
                prim = PRIMITIVES[node.op]
                values.append(prim.forward([values[i] for i in node.inputs], node.attrs))
        return values

    def backward(self, loss: Node, wrt: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
        if loss.graph is not self:
            raise GraphError("loss node belongs to another graph")
        if loss.value.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[Optional[np.ndarray]] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or not node.requires_grad or node.op in ("leaf", "constant"):
                continue
            prim = PRIMITIVES[node.op]
            input_values = [self.nodes[i].value for i in node.inputs]
            input_grads = prim.backward(g, input_values, node.value, node.attrs)
            for i, ig in zip(node.inputs, input_grads):
                if ig is None or not self.nodes[i].requires_grad:
                    continue
                if grads[i] is None:
                    grads[i] = np.array(ig, dtype=np.float64)
                else:
                    grads[i] = grads[i] + ig

        result: Dict[str, np.ndarray] = {}
        for index, tensor in self.leaf_tensors.items():
            if not tensor.requires_grad:
                continue
            g = grads[index] if index < len(grads) else None
            full = np.zeros_like(tensor.data) if g is None else g
            tensor.grad = full
            result[self.nodes[index].name or f"leaf{index}"] = full
        for name, tensor in (wrt or {}).items():
            if name not in result:
                tensor.grad = np.zeros_like(tensor.data)
                result[name] = tensor.grad
        return result


# ------------------------------------------------------------
# Functional entry points
# ------------------------------------------------------------


@dataclass
class ForwardPass:
    graph: Graph
    outputs: Dict[str, Node] = field(default_factory=dict)

    def values(self) -> Dict[str, np.ndarray]:
        return {k: v.value for k, v in self.outputs.items()}


GraphBuilder = Callable[[Graph, Dict[str, Node]], Mapping[str, Node]]


def forward(builder: GraphBuilder, inputs: Mapping[str, Tensor], grad_enabled: bool = True) -> ForwardPass:
    """Bind the named inputs on a fresh graph and run the builder."""
    graph = Graph(grad_enabled=grad_enabled)
    bound = {name: graph.param(t, name) for name, t in inputs.items()}
    outputs = builder(graph, bound)
    return ForwardPass(graph, dict(outputs))


def backward(graph: Graph, loss: Node, wrt: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    return graph.backward(loss, wrt)


def checksum(tensors: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
