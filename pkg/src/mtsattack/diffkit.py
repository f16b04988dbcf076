"""Small reverse-mode automatic differentiation engine on numpy arrays.

A :class:`Graph` records every operation applied to its nodes, in insertion
order.  Nodes created from bound leaves are evaluated eagerly, so the usual
pattern is define-by-run::

    g = Graph()
    x = g.leaf("x", np.array([1.0, 2.0]))
    y = (x * x).sum()
    grads = g.backward(y)          # {"x": array([2., 4.])}

Leaves may also be declared without a value; in that case the graph is
symbolic until :meth:`Graph.forward` binds the inputs and evaluates every node.
:meth:`Graph.forward` can also be called again with new bindings to replay
the recorded computation.

Everything is float64.  Any non-finite intermediate raises
:class:`NonFiniteError`.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "GraphStateError",
    "forward",
    "backward",
    "concat",
    "stack",
    "where_mask",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _bshape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# Each op kind maps to (forward, vjp).  forward(vals, attrs) -> array;
# vjp(g, vals, out, attrs, need) -> list of parent gradients (None if unused).


def _f_add(v, a):
    _bshape(v[0], v[1])
    return v[0] + v[1]


def _b_add(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(g, v[1].shape) if need[1] else None]


def _f_sub(v, a):
    _bshape(v[0], v[1])
    return v[0] - v[1]


def _b_sub(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(-g, v[1].shape) if need[1] else None]


def _f_mul(v, a):
    _bshape(v[0], v[1])
    return v[0] * v[1]


def _b_mul(g, v, out, a, need):
    return [_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None]


def _f_div(v, a):
    _bshape(v[0], v[1])
    return v[0] / v[1]


def _b_div(g, v, out, a, need):
    return [_unbroadcast(g / v[1], v[0].shape) if need[0] else None,
            _unbroadcast(-g * out / v[1], v[1].shape) if need[1] else None]


def _f_matmul(v, a):
    x, y = v
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {x.shape} @ {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {x.shape} @ {y.shape}")
    try:
        return np.matmul(x, y)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _b_matmul(g, v, out, a, need):
    x, y = v
    gx = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if need[0] else None
    gy = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if need[1] else None
    return [gx, gy]


def _softplus(z):
    # z + log1p(exp(-z)) for z > 0 keeps exp from overflowing
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0.0))))


_UNARY = {
    "neg": (lambda x: -x, lambda g, x, o: -g),
    "tanh": (np.tanh, lambda g, x, o: g * (1.0 - o * o)),
    "sigmoid": (special.expit, lambda g, x, o: g * o * (1.0 - o)),
    "softplus": (_softplus, lambda g, x, o: g * special.expit(x)),
    "exp": (np.exp, lambda g, x, o: g * o),
    "log": (np.log, lambda g, x, o: g / x),
    "sqrt": (np.sqrt, lambda g, x, o: g * 0.5 / o),
    "square": (np.square, lambda g, x, o: g * 2.0 * x),
    "ndtri": (special.ndtri, lambda g, x, o: g * np.sqrt(2.0 * np.pi) * np.exp(0.5 * o * o)),
}


def _f_sum(v, a):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _b_sum(g, v, out, a, need):
    x = v[0]
    axis = a["axis"]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _f_mean(v, a):
    return np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _b_mean(g, v, out, a, need):
    x = v[0]
    axis = a["axis"]
    count = x.size // max(np.size(out), 1) if axis is not None else x.size
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape) / count]


def _f_broadcast(v, a):
    try:
        return np.broadcast_to(v[0], a["shape"]).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {v[0].shape} to {a['shape']}") from exc


def _b_broadcast(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape)]


def _f_reshape(v, a):
    try:
        return v[0].reshape(a["shape"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _b_reshape(g, v, out, a, need):
    return [g.reshape(v[0].shape)]


def _f_transpose(v, a):
    return np.transpose(v[0], a["axes"])


def _b_transpose(g, v, out, a, need):
    return [np.transpose(g, np.argsort(a["axes"]))]


def _f_slice(v, a):
    try:
        return np.array(v[0][a["key"]], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(str(exc)) from exc


def _b_slice(g, v, out, a, need):
    full = np.zeros_like(v[0])
    if a.get("fancy"):
        np.add.at(full, a["key"], g)
    else:
        full[a["key"]] = g
    return [full]


def _f_concat(v, a):
    try:
        return np.concatenate(v, axis=a["axis"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _b_concat(g, v, out, a, need):
    bounds = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    parts = np.split(g, bounds, axis=a["axis"])
    return [p if n else None for p, n in zip(parts, need)]


def _f_stack(v, a):
    try:
        return np.stack(v, axis=a["axis"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _b_stack(g, v, out, a, need):
    parts = np.moveaxis(g, a["axis"], 0)
    return [parts[i] if n else None for i, n in enumerate(need)]


def _f_clip(v, a):
    return np.clip(v[0], a["lo"], a["hi"])


def _b_clip(g, v, out, a, need):
    x = v[0]
    inside = np.ones_like(x, dtype=bool)
    if a["lo"] is not None:
        inside &= x >= a["lo"]
    if a["hi"] is not None:
        inside &= x <= a["hi"]
    return [g * inside]


def _f_inv(v, a):
    x = v[0]
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"inv needs square trailing dims, got {x.shape}")
    return np.linalg.inv(x)


def _b_inv(g, v, out, a, need):
    it = np.swapaxes(out, -1, -2)
    return [-np.matmul(np.matmul(it, g), it)]


def _f_logdet(v, a):
    x = v[0]
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"logdet needs square trailing dims, got {x.shape}")
    sign, ld = np.linalg.slogdet(x)
    if np.any(sign <= 0):
        raise NonFiniteError("logdet of a matrix with non-positive determinant")
    return ld


def _b_logdet(g, v, out, a, need):
    inv_t = np.swapaxes(np.linalg.inv(v[0]), -1, -2)
    return [np.asarray(g)[..., None, None] * inv_t]


_OPS = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "div": (_f_div, _b_div),
    "matmul": (_f_matmul, _b_matmul),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
    "broadcast": (_f_broadcast, _b_broadcast),
    "reshape": (_f_reshape, _b_reshape),
    "transpose": (_f_transpose, _b_transpose),
    "slice": (_f_slice, _b_slice),
    "concat": (_f_concat, _b_concat),
    "stack": (_f_stack, _b_stack),
    "clip": (_f_clip, _b_clip),
    "inv": (_f_inv, _b_inv),
    "logdet": (_f_logdet, _b_logdet),
}

for _name, (_fwd, _vjp) in _UNARY.items():
    _OPS[_name] = (
        (lambda f: lambda v, a: f(v[0]))(_fwd),
        (lambda b: lambda g, v, out, a, need: [b(g, v[0], out)])(_vjp),
    )

OP_KINDS = tuple(sorted(_OPS))


class Node:
    """A value in a :class:`Graph`: a leaf, a constant or an op output."""

    __slots__ = ("graph", "id", "op", "parents", "attrs", "value", "name", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, graph, op, parents, attrs, value, name, requires_grad):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.name = name
        self.requires_grad = requires_grad
        graph.nodes.append(self)

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        return f"Node({self.op}, id={self.id}, shape={self.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.apply("div", self._lift(other), self)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.graph.apply("matmul", self._lift(other), self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __getitem__(self, key):
        fancy = _is_fancy(key)
        return self.graph.apply("slice", self, key=key, fancy=fancy)

    def tanh(self):
        return self.graph.apply("tanh", self)

    def sigmoid(self):
        return self.graph.apply("sigmoid", self)

    def softplus(self):
        return self.graph.apply("softplus", self)

    def exp(self):
        return self.graph.apply("exp", self)

    def log(self):
        return self.graph.apply("log", self)

    def sqrt(self):
        return self.graph.apply("sqrt", self)

    def square(self):
        return self.graph.apply("square", self)

    def ndtri(self):
        return self.graph.apply("ndtri", self)

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", self, axis=axis, keepdims=keepdims)

    def broadcast_to(self, shape):
        return self.graph.apply("broadcast", self, shape=tuple(shape))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return self.graph.apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        if not axes:
            axes = tuple(reversed(range(np.ndim(self.value))))
        return self.graph.apply("transpose", self, axes=tuple(axes))

    def swapaxes(self, a1, a2):
        n = self.value.ndim
        axes = list(range(n))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)

    def clip(self, lo=None, hi=None):
        return self.graph.apply("clip", self, lo=lo, hi=hi)

    def inv(self):
        return self.graph.apply("inv", self)

    def logdet(self):
        return self.graph.apply("logdet", self)


def _is_fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


class Graph:
    """Records ops in insertion order; single owner, not thread-safe."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def leaf(self, name, value=None, requires_grad=True):
        """Create a named leaf.  ``value=None`` makes it a placeholder."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        val = None if value is None else _as_array(value)
        node = Node(self, "leaf", (), {}, val, name, requires_grad)
        self.leaves[name] = node
        return node

    def const(self, value):
        return Node(self, "const", (), {}, _as_array(value), None, False)

    def apply(self, op, *parents, **attrs):
        fwd, _ = _OPS[op]
        requires = any(p.requires_grad for p in parents)
        node = Node(self, op, parents, attrs, None, None, requires)
        if all(p.value is not None for p in parents):
            with np.errstate(all="ignore"):
                node.value = _checked(op, fwd([p.value for p in parents], attrs))
        return node

    def forward(self, inputs=None, root=None):
        """Bind ``inputs`` (name -> array) and evaluate every node in order."""
        inputs = inputs or {}
        for name, val in inputs.items():
            if name not in self.leaves:
                raise KeyError(f"unknown leaf {name!r}")
            self.leaves[name].value = _as_array(val)
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                if node.value is None:
                    raise GraphStateError(f"leaf {node.name!r} is unbound")
                continue
            fwd, _ = _OPS[node.op]
            with np.errstate(all="ignore"):
                node.value = _checked(node.op, fwd([p.value for p in node.parents], node.attrs))
        if not self.nodes:
            raise GraphStateError("empty graph")
        return (root if root is not None else self.nodes[-1]).value

    def backward(self, root):
        """Gradient of scalar ``root`` w.r.t. every named leaf."""
        if root.value is None:
            raise GraphStateError("backward called before forward")
        if np.size(root.value) != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.parents:
                if node.op == "leaf" and g is not None:
                    grads[node.id] = g
                continue
            need = [p.requires_grad for p in node.parents]
            vals = [p.value for p in node.parents]
            if any(v is None for v in vals):
                raise GraphStateError("backward called before forward")
            _, vjp = _OPS[node.op]
            pgs = vjp(g, vals, node.value, node.attrs, need)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else prev + pg
        out = {}
        for name, leaf in self.leaves.items():
            if not leaf.requires_grad:
                continue
            g = grads.get(leaf.id)
            out[name] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=np.float64).reshape(leaf.value.shape)
        return out


def _as_array(value):
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite input value")
    return arr


def _checked(op, out):
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {op!r} produced a non-finite value")
    return out


def forward(graph, inputs=None, root=None):
    return graph.forward(inputs, root)


def backward(graph, root):
    return graph.backward(root)


def concat(nodes, axis=0):
    nodes = list(nodes)
    return nodes[0].graph.apply("concat", *nodes, axis=axis)


def stack(nodes, axis=0):
    nodes = list(nodes)
    return nodes[0].graph.apply("stack", *nodes, axis=axis)


def where_mask(node, mask):
    """Multiply by a fixed 0/1 array (no gradient through ``mask``)."""
    return node * node.graph.const(mask)
