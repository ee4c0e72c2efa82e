"""Source-transformation automatic differentiation over numpy arrays.

Expressions are immutable DAGs of :class:`Node` objects.  :func:`grad` walks a
scalar target in reverse topological order and emits *new nodes* for the
adjoints, so the result is an ordinary expression that can itself be
differentiated.  That closure is what makes losses containing input
derivatives of networks trainable.

Everything is evaluated in float64.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "ComputeGraph",
    "GradientRequest",
    "GraphError",
    "UnboundLeafError",
    "ShapeError",
    "var",
    "const",
    "as_node",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "square",
    "tanh",
    "sin",
    "cos",
    "matmul",
    "transpose",
    "reshape",
    "sum_to",
    "broadcast_to",
    "total",
    "mean",
    "concat",
    "slice_",
    "pad",
    "grad",
    "derive",
    "evaluate",
    "finite_difference_check",
    "PRIMITIVES",
]


class GraphError(Exception):
    """Malformed graph or unsupported differentiation request."""


class UnboundLeafError(GraphError):
    pass


class ShapeError(GraphError):
    pass


_ids = itertools.count()


class Node:
    __slots__ = ("op", "inputs", "attrs", "shape", "id", "value", "name")

    def __init__(self, op: str, inputs: tuple, shape: tuple, attrs: Any = None,
                 value: np.ndarray | None = None, name: str | None = None):
        self.op = op
        self.inputs = inputs
        self.shape = tuple(shape)
        self.attrs = attrs
        self.value = value
        self.name = name
        self.id = next(_ids)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label} shape={self.shape} #{self.id}>"

    # operator sugar; keeps model code readable
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, item):
        # only column/row ranges along one axis are supported
        if isinstance(item, tuple) and len(item) == 2 and item[0] == slice(None):
            sl = item[1]
            axis = 1
        elif isinstance(item, slice):
            sl, axis = item, 0
        else:
            raise GraphError(f"unsupported index {item!r}")
        start, stop, step = sl.indices(self.shape[axis])
        if step != 1:
            raise GraphError("strided slices are not supported")
        return slice_(self, axis, start, stop)

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self.op in ("var", "const")


# ---------------------------------------------------------------- leaves

def var(name: str, shape: Sequence[int] = ()) -> Node:
    """An input slot, bound at evaluation time."""
    return Node("var", (), tuple(shape), name=name)


def const(value, name: str | None = None) -> Node:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return Node("const", (), arr.shape, value=arr, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _const_scalar(node: Node):
    """Return the python float if ``node`` is a constant uniform array, else None."""
    if node.op != "const":
        return None
    v = node.value
    if v.size == 0:
        return None
    first = float(v.flat[0])
    if v.size == 1 or np.all(v == first):
        return first
    return None


def _is_zero(node: Node) -> bool:
    return _const_scalar(node) == 0.0


def _zeros(shape) -> Node:
    return const(np.zeros(shape))


# ---------------------------------------------------------------- primitives

def _bshape(a: Node, b: Node) -> tuple:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    shape = _bshape(a, b)
    if _is_zero(a) and b.shape == shape:
        return b
    if _is_zero(b) and a.shape == shape:
        return a
    return Node("add", (a, b), shape)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    shape = _bshape(a, b)
    if _is_zero(b) and a.shape == shape:
        return a
    if _is_zero(a) and b.shape == shape:
        return neg(b)
    return Node("sub", (a, b), shape)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    shape = _bshape(a, b)
    ca, cb = _const_scalar(a), _const_scalar(b)
    if ca == 0.0 or cb == 0.0:
        return _zeros(shape)
    if ca == 1.0 and b.shape == shape:
        return b
    if cb == 1.0 and a.shape == shape:
        return a
    if ca == -1.0 and b.shape == shape:
        return neg(b)
    if cb == -1.0 and a.shape == shape:
        return neg(a)
    return Node("mul", (a, b), shape)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    shape = _bshape(a, b)
    if _is_zero(a):
        return _zeros(shape)
    if _const_scalar(b) == 1.0 and a.shape == shape:
        return a
    return Node("div", (a, b), shape)


def neg(a) -> Node:
    a = as_node(a)
    if a.op == "neg":
        return a.inputs[0]
    if _is_zero(a):
        return a
    return Node("neg", (a,), a.shape)


def power(a, n: int) -> Node:
    """Integer power."""
    a = as_node(a)
    if int(n) != n:
        raise GraphError("power exponent must be an integer")
    n = int(n)
    if n == 0:
        return const(np.ones(a.shape))
    if n == 1:
        return a
    if n == 2:
        return square(a)
    return Node("pow", (a,), a.shape, attrs=n)


def square(a) -> Node:
    a = as_node(a)
    return Node("square", (a,), a.shape)


def tanh(a) -> Node:
    a = as_node(a)
    return Node("tanh", (a,), a.shape)


def sin(a) -> Node:
    a = as_node(a)
    return Node("sin", (a,), a.shape)


def cos(a) -> Node:
    a = as_node(a)
    return Node("cos", (a,), a.shape)


def matmul(a, b) -> Node:
    """Matrix product for 1-d/2-d operands (matrix-vector included)."""
    a, b = as_node(a), as_node(b)
    if not (1 <= len(a.shape) <= 2 and 1 <= len(b.shape) <= 2):
        raise ShapeError(f"matmul needs 1-d or 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shape = a.shape[:-1] + b.shape[1:]
    if _is_zero(a) or _is_zero(b):
        return _zeros(shape)
    return Node("matmul", (a, b), shape)


def transpose(a) -> Node:
    a = as_node(a)
    if len(a.shape) != 2:
        raise ShapeError("transpose needs a 2-d operand")
    if a.op == "transpose":
        return a.inputs[0]
    return Node("transpose", (a,), a.shape[::-1])


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=int)) != int(np.prod(a.shape, dtype=int)):
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    if shape == a.shape:
        return a
    return Node("reshape", (a,), shape, attrs=shape)


def _reduction_axes(src: tuple, dst: tuple):
    lead = len(src) - len(dst)
    if lead < 0:
        raise ShapeError(f"cannot reduce {src} to {dst}")
    axes = list(range(lead))
    for i, d in enumerate(dst):
        s = src[lead + i]
        if d == 1 and s != 1:
            axes.append(lead + i)
        elif d != s:
            raise ShapeError(f"cannot reduce {src} to {dst}")
    return lead, tuple(axes)


def sum_to(a, shape) -> Node:
    """Sum ``a`` down to ``shape`` (inverse of numpy broadcasting)."""
    a = as_node(a)
    shape = tuple(shape)
    if shape == a.shape:
        return a
    _reduction_axes(a.shape, shape)
    if _is_zero(a):
        return _zeros(shape)
    return Node("sum_to", (a,), shape, attrs=shape)


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if shape == a.shape:
        return a
    _reduction_axes(shape, a.shape)
    if _is_zero(a):
        return _zeros(shape)
    return Node("broadcast_to", (a,), shape, attrs=shape)


def total(a) -> Node:
    """Sum of all entries, a scalar."""
    return sum_to(a, ())


def mean(a) -> Node:
    a = as_node(a)
    n = int(np.prod(a.shape, dtype=int))
    return div(total(a), float(n))


def concat(parts: Sequence, axis: int = 0) -> Node:
    parts = tuple(as_node(p) for p in parts)
    if not parts:
        raise GraphError("concat of nothing")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                p.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat shapes disagree: {[p.shape for p in parts]}")
    shape = list(ref)
    shape[axis] = sum(p.shape[axis] for p in parts)
    return Node("concat", parts, tuple(shape), attrs=axis)


def slice_(a, axis: int, start: int, stop: int) -> Node:
    a = as_node(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    if start == 0 and stop == n:
        return a
    shape = list(a.shape)
    shape[axis] = stop - start
    if _is_zero(a):
        return _zeros(shape)
    return Node("slice", (a,), tuple(shape), attrs=(axis, start, stop))


def pad(a, axis: int, start: int, length: int) -> Node:
    """Embed ``a`` at offset ``start`` of a zero array of ``length`` along ``axis``."""
    a = as_node(a)
    if start < 0 or start + a.shape[axis] > length:
        raise ShapeError("pad window exceeds target length")
    shape = list(a.shape)
    shape[axis] = length
    if _is_zero(a):
        return _zeros(shape)
    if length == a.shape[axis]:
        return a
    return Node("pad", (a,), tuple(shape), attrs=(axis, start, length))


# ---------------------------------------------------------------- numeric kernels

def _k_sum_to(x, shape):
    lead, axes = _reduction_axes(x.shape, shape)
    if not axes:
        return x
    out = np.sum(x, axis=axes, keepdims=True)
    return out.reshape(shape)


def _k_slice(x, attrs):
    axis, start, stop = attrs
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)]


def _k_pad(x, attrs):
    axis, start, length = attrs
    shape = list(x.shape)
    shape[axis] = length
    out = np.zeros(shape)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + x.shape[axis])
    out[tuple(idx)] = x
    return out


_KERNELS = {
    "add": lambda n, a, b: a + b,
    "sub": lambda n, a, b: a - b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: a / b,
    "neg": lambda n, a: -a,
    "pow": lambda n, a: a ** n.attrs,
    "square": lambda n, a: a * a,
    "tanh": lambda n, a: np.tanh(a),
    "sin": lambda n, a: np.sin(a),
    "cos": lambda n, a: np.cos(a),
    "matmul": lambda n, a, b: a @ b,
    "transpose": lambda n, a: a.T,
    "reshape": lambda n, a: a.reshape(n.attrs),
    "sum_to": lambda n, a: _k_sum_to(a, n.attrs),
    "broadcast_to": lambda n, a: np.broadcast_to(a, n.attrs),
    "concat": lambda n, *xs: np.concatenate(xs, axis=n.attrs),
    "slice": lambda n, a: _k_slice(a, n.attrs),
    "pad": lambda n, a: _k_pad(a, n.attrs),
}


# ---------------------------------------------------------------- adjoint rules
# Each rule maps (node, upstream adjoint) to one adjoint per input, built only
# from primitives above so the result can be differentiated again.

def _vjp_matmul(node, g):
    a, b = node.inputs
    if len(a.shape) == 2 and len(b.shape) == 2:
        return matmul(g, transpose(b)), matmul(transpose(a), g)
    if len(a.shape) == 2:  # matrix @ vector
        ga = matmul(reshape(g, (a.shape[0], 1)), reshape(b, (1, b.shape[0])))
        return ga, matmul(transpose(a), g)
    if len(b.shape) == 2:  # vector @ matrix
        gb = matmul(reshape(a, (a.shape[0], 1)), reshape(g, (1, b.shape[1])))
        return matmul(b, g), gb
    # vector . vector
    return mul(g, b), mul(g, a)


def _vjp_concat(node, g):
    axis = node.attrs
    out, offset = [], 0
    for p in node.inputs:
        width = p.shape[axis]
        out.append(slice_(g, axis, offset, offset + width))
        offset += width
    return tuple(out)


_VJP = {
    "add": lambda n, g: (sum_to(g, n.inputs[0].shape), sum_to(g, n.inputs[1].shape)),
    "sub": lambda n, g: (sum_to(g, n.inputs[0].shape), sum_to(neg(g), n.inputs[1].shape)),
    "mul": lambda n, g: (sum_to(mul(g, n.inputs[1]), n.inputs[0].shape),
                         sum_to(mul(g, n.inputs[0]), n.inputs[1].shape)),
    "div": lambda n, g: (sum_to(div(g, n.inputs[1]), n.inputs[0].shape),
                         sum_to(neg(div(mul(g, n), n.inputs[1])), n.inputs[1].shape)),
    "neg": lambda n, g: (neg(g),),
    "pow": lambda n, g: (mul(g, mul(float(n.attrs), power(n.inputs[0], n.attrs - 1))),),
    "square": lambda n, g: (mul(g, mul(2.0, n.inputs[0])),),
    "tanh": lambda n, g: (mul(g, sub(1.0, square(n))),),
    "sin": lambda n, g: (mul(g, cos(n.inputs[0])),),
    "cos": lambda n, g: (neg(mul(g, sin(n.inputs[0]))),),
    "matmul": _vjp_matmul,
    "transpose": lambda n, g: (transpose(g),),
    "reshape": lambda n, g: (reshape(g, n.inputs[0].shape),),
    "sum_to": lambda n, g: (broadcast_to(g, n.inputs[0].shape),),
    "broadcast_to": lambda n, g: (sum_to(g, n.inputs[0].shape),),
    "concat": _vjp_concat,
    "slice": lambda n, g: (pad(g, n.attrs[0], n.attrs[1], n.inputs[0].shape[n.attrs[0]]),),
    "pad": lambda n, g: (slice_(g, n.attrs[0], n.attrs[1],
                                n.attrs[1] + n.inputs[0].shape[n.attrs[0]]),),
}

PRIMITIVES = tuple(sorted(_KERNELS))


# ---------------------------------------------------------------- graphs

def _toposort(outputs: Iterable[Node]) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp.id not in seen:
                    stack.append((inp, False))
    return order


class ComputeGraph:
    """An immutable set of output expressions plus a cached evaluation schedule."""

    def __init__(self, outputs: Node | Sequence[Node]):
        if isinstance(outputs, Node):
            outputs = (outputs,)
        self.outputs = tuple(outputs)
        self.order = _toposort(self.outputs)
        self._index = {n.id: i for i, n in enumerate(self.order)}
        self.leaves = tuple(n for n in self.order if n.op == "var")
        names = [n.name for n in self.leaves]
        if len(set(names)) != len(names):
            raise GraphError("duplicate input slot names in one graph")
        self._by_name = {n.name: n for n in self.leaves}
        self._program = []
        for n in self.order:
            if n.op == "var" or n.op == "const":
                continue
            fn = _KERNELS.get(n.op)
            if fn is None:
                raise GraphError(f"no kernel registered for {n.op!r}")
            self._program.append((self._index[n.id], fn, n,
                                  tuple(self._index[i.id] for i in n.inputs)))
        self._out_idx = tuple(self._index[o.id] for o in self.outputs)

    def __len__(self):
        return len(self.order)

    def slot(self, name: str) -> Node:
        return self._by_name[name]

    def evaluate(self, bindings: Mapping, *, all_nodes: bool = False):
        vals: list = [None] * len(self.order)
        for i, n in enumerate(self.order):
            if n.op == "const":
                vals[i] = n.value
        for leaf in self.leaves:
            if leaf in bindings:
                v = bindings[leaf]
            elif leaf.name in bindings:
                v = bindings[leaf.name]
            else:
                raise UnboundLeafError(f"input slot {leaf.name!r} is not bound")
            v = np.asarray(v, dtype=np.float64)
            if v.shape != leaf.shape:
                raise ShapeError(f"slot {leaf.name!r} expects shape {leaf.shape}, got {v.shape}")
            vals[self._index[leaf.id]] = v
        for idx, fn, node, ins in self._program:
            vals[idx] = fn(node, *[vals[j] for j in ins])
        if all_nodes:
            return {n: vals[i] for i, n in enumerate(self.order)}
        return [vals[i] for i in self._out_idx]

    __call__ = evaluate


@dataclass(frozen=True)
class GradientRequest:
    target: Node
    with_respect_to: tuple

    def __post_init__(self):
        object.__setattr__(self, "with_respect_to", tuple(self.with_respect_to))


def grad(target: Node, wrt: Sequence[Node]) -> list[Node]:
    """Adjoint expressions d(target)/d(w) for each node in ``wrt``.

    ``wrt`` may contain interior nodes; the derivative then treats that node
    as an independent input (other dependencies on its ancestors are held
    fixed), matching the usual ``create_graph`` semantics.
    """
    if target.shape != ():
        raise GraphError(f"target must be scalar, got shape {target.shape}")
    wrt = list(wrt)
    wrt_ids = {w.id for w in wrt}
    order = _toposort([target])
    # nodes that depend on some requested node; stop descending below them
    relevant: set[int] = set()
    for n in order:
        if n.id in wrt_ids or any(i.id in relevant for i in n.inputs):
            relevant.add(n.id)
    adj: dict[int, Node] = {}
    if target.id in relevant:
        adj[target.id] = const(1.0)
    for n in reversed(order):
        g = adj.get(n.id)
        if g is None or n.id in wrt_ids or n.is_leaf:
            continue
        rule = _VJP.get(n.op)
        if rule is None:
            raise GraphError(f"no derivative registered for {n.op!r}")
        contribs = rule(n, g)
        for inp, c in zip(n.inputs, contribs):
            if inp.id not in relevant or _is_zero(c):
                continue
            prev = adj.get(inp.id)
            adj[inp.id] = c if prev is None else add(prev, c)
    out = []
    for w in wrt:
        g = adj.get(w.id)
        out.append(_zeros(w.shape) if g is None else g)
    return out


def derive(graph: ComputeGraph | Node, request: GradientRequest | Sequence[Node]) -> ComputeGraph:
    """Return a new graph whose outputs are the requested derivatives."""
    if isinstance(request, GradientRequest):
        target, wrt = request.target, request.with_respect_to
    else:
        if isinstance(graph, Node):
            target = graph
        else:
            if len(graph.outputs) != 1:
                raise GraphError("graph has several outputs; pass a GradientRequest")
            target = graph.outputs[0]
        wrt = tuple(request)
    return ComputeGraph(grad(target, wrt))


def evaluate(graph: ComputeGraph | Node | Sequence[Node], bindings: Mapping | None = None,
             **kw):
    if not isinstance(graph, ComputeGraph):
        graph = ComputeGraph(graph)
    return graph.evaluate(bindings or {}, **kw)


def finite_difference_check(graph: ComputeGraph | Node, request: GradientRequest | Sequence[Node],
                            bindings: Mapping, step: float = 1e-5) -> float:
    """Max relative error between :func:`derive` and central differences.

    Only input slots (``var`` nodes) can be perturbed.  The relative error of
    each entry is ``|a - f| / max(|a|, |f|, 1)`` so tiny gradients are compared
    absolutely.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(request, GradientRequest):
        target, wrt = request.target, request.with_respect_to
    else:
        target = graph if isinstance(graph, Node) else graph.outputs[0]
        wrt = tuple(request)
    if not wrt:
        return 0.0
    fwd = ComputeGraph(target)
    analytic = ComputeGraph(grad(target, wrt)).evaluate(bindings)
    base = {}
    for k, v in bindings.items():
        key = k.name if isinstance(k, Node) else k
        base[key] = np.array(v, dtype=np.float64)
    worst = 0.0
    for w, a in zip(wrt, analytic):
        if w.op != "var":
            raise GraphError("finite differences need input slots, not interior nodes")
        x = base[w.name]
        fd = np.zeros(w.shape)
        for idx in np.ndindex(*w.shape):
            orig = x[idx]
            x[idx] = orig + step
            up = float(fwd.evaluate(base)[0])
            x[idx] = orig - step
            down = float(fwd.evaluate(base)[0])
            x[idx] = orig
            fd[idx] = (up - down) / (2 * step)
        a = np.asarray(a)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1.0)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - fd) / scale)))
    return worst
