"""Dense float64 math with a reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A
:class:`ValueGraph` records every operation applied to its :class:`Node`
objects in construction order, which is a topological order, so the
backward pass is a single reverse sweep over ``graph.nodes``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum grad over the axes that were broadcast to reach grad.shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("graph", "id", "value", "parents", "vjp", "requires_grad", "op")

    def __init__(self, graph, value, parents, vjp, requires_grad, op):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


class ValueGraph:
    """Append-only record of operations for one forward/backward pass.

    Graphs are rebuilt every step; they are not meant to be replayed.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._bound: dict[int, list[tuple[Node, Node]]] = {}
        self._pinned: list = []  # keeps bound params alive so id() stays unique

    def _add(self, value, parents=(), vjp=None, op="leaf", requires_grad=None):
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {op!r}")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, value, tuple(parents), vjp, requires_grad, op)
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = True) -> Node:
        return self._add(np.array(value, dtype=np.float64), requires_grad=requires_grad)

    def const(self, value) -> Node:
        return self._add(np.array(value, dtype=np.float64), requires_grad=False, op="const")

    def bind(self, params: "MlpParams") -> list[tuple[Node, Node]]:
        """Leaf nodes for ``params``; repeated calls return the same nodes."""
        key = id(params)
        if key not in self._bound:
            trainable = not params.frozen
            self._bound[key] = [
                (self.leaf(w, trainable), self.leaf(b, trainable)) for w, b in params.layers
            ]
            self._pinned.append(params)
        return self._bound[key]


# --- elementary ops -------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return a.graph._add(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return a.graph._add(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def neg(a: Node) -> Node:
    return a.graph._add(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    return a.graph._add(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.graph._add(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.graph._add(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.graph._add(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def reciprocal(a: Node) -> Node:
    out = 1.0 / a.value
    return a.graph._add(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def total(a: Node, axis=None) -> Node:
    """Sum over ``axis`` (all axes when None)."""
    shape = a.shape
    out = a.value.sum(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.graph._add(out, (a,), vjp, "sum")


def mean(a: Node, axis=None) -> Node:
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(total(a, axis), a.graph.const(1.0 / count))


def take_columns(a: Node, cols) -> Node:
    """Pick ``a[i, cols[i]]`` for every row i."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return a.graph._add(a.value[rows, cols], (a,), vjp, "take")


# --- model-level ops ------------------------------------------------------


def softmax(logits) -> Node | np.ndarray:
    """Row-wise softmax with max subtraction.

    Accepts a Node (recorded on its graph) or a raw array (evaluated eagerly).
    """
    if not isinstance(logits, Node):
        z = as_tensor(logits)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    z = logits.value
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return logits.graph._add(out, (logits,), vjp, "softmax")


def neg_log_floor(a: Node, floor: float = PROB_FLOOR) -> Node:
    """Elementwise ``-ln(max(a, floor))``; zero gradient where clamped."""
    v = a.value
    clamped = np.maximum(v, floor)
    live = v > floor

    def vjp(g):
        return (np.where(live, -g / clamped, 0.0),)

    return a.graph._add(-np.log(clamped), (a,), vjp, "neglog")


def cross_entropy(p, y):
    """``-ln p[y]`` with probabilities floored at 1e-12.

    ``p`` may be a single probability vector (array) with integer ``y``, or a
    Node of shape (n, K) with ``y`` of length n, in which case a Node of
    per-sample losses is returned.
    """
    if isinstance(p, Node):
        k = p.shape[-1]
        y = np.asarray(y, dtype=np.intp)
        if y.shape != (p.shape[0],):
            raise ShapeError("one label per row required")
        if np.any((y < 0) | (y >= k)):
            raise IndexError(f"label out of range for K={k}")
        return neg_log_floor(take_columns(p, y))
    p = as_tensor(p)
    y = int(y)
    if not 0 <= y < p.shape[-1]:
        raise IndexError(f"label {y} out of range for K={p.shape[-1]}")
    return float(-np.log(max(p[y], PROB_FLOOR)))


def _row_norms(a: np.ndarray) -> np.ndarray:
    n = np.sqrt((a * a).sum(axis=-1))
    if np.any(n == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return n


def cosine_similarity(a, b):
    """Cosine of the angle between vectors (or between matching rows).

    Raw arrays give floats / arrays; Nodes give a Node of per-row values.
    """
    if not isinstance(a, Node) and not isinstance(b, Node):
        a, b = as_tensor(a), as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
        c = (a * b).sum(axis=-1) / (_row_norms(a) * _row_norms(b))
        c = np.clip(c, -1.0, 1.0)
        return float(c) if c.ndim == 0 else c
    g = a.graph if isinstance(a, Node) else b.graph
    a = a if isinstance(a, Node) else g.const(a)
    b = b if isinstance(b, Node) else g.const(b)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    _row_norms(a.value)
    _row_norms(b.value)
    dot = total(a * b, axis=-1)
    na = sqrt(total(a * a, axis=-1))
    nb = sqrt(total(b * b, axis=-1))
    return dot * reciprocal(na * nb)


def pairwise_sqdist(x: Node, y: Node) -> Node:
    """Matrix of squared Euclidean distances between rows of x and rows of y."""
    xv, yv = x.value, y.value
    if xv.ndim != 2 or yv.ndim != 2 or xv.shape[1] != yv.shape[1]:
        raise ShapeError(f"incompatible sample batches {xv.shape} and {yv.shape}")
    diff = xv[:, None, :] - yv[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def vjp(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return x.graph._add(out, (x, y), vjp, "sqdist")


def mmd_rbf(X, Y, bandwidth: float):
    """Biased (V-statistic) squared MMD with kernel exp(-|x-y|^2 / (2 h^2)).

    Works on Nodes (differentiable) or raw arrays (returns a float).
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    eager = not isinstance(X, Node) and not isinstance(Y, Node)
    g = ValueGraph() if eager else (X.graph if isinstance(X, Node) else Y.graph)
    X = X if isinstance(X, Node) else g.const(X)
    Y = Y if isinstance(Y, Node) else g.const(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("sample batches must be nonempty")
    scale = g.const(-1.0 / (2.0 * bandwidth * bandwidth))

    def kmean(a, b):
        return mean(exp(pairwise_sqdist(a, b) * scale))

    out = kmean(X, X) + kmean(Y, Y) - kmean(X, Y) * 2.0
    return float(out.value) if eager else out


def median_bandwidth(Y) -> float:
    """Median pairwise distance between distinct rows of Y."""
    Y = as_tensor(Y)
    d = np.sqrt(((Y[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1))
    iu = np.triu_indices(len(Y), k=1)
    h = float(np.median(d[iu]))
    if not h > 0:
        raise DegenerateInputError("median pairwise distance is zero")
    return h


# --- backward -------------------------------------------------------------


class Gradients:
    """Gradients from one backward pass, indexed by Node or MlpParams."""

    def __init__(self, graph: ValueGraph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, key):
        if isinstance(key, Node):
            g = self._grads.get(key.id)
            return np.zeros_like(key.value) if g is None else g
        if isinstance(key, MlpParams):
            bound = self._graph._bound.get(id(key))
            if bound is None:
                return [(np.zeros_like(w), np.zeros_like(b)) for w, b in key.layers]
            return [(self[wn], self[bn]) for wn, bn in bound]
        raise TypeError(f"cannot index gradients by {type(key).__name__}")


def backward(graph: ValueGraph, output: Node) -> Gradients:
    """Reverse sweep from a scalar ``output``."""
    if output.graph is not graph:
        raise ValueError("output node belongs to a different graph")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for node in reversed(graph.nodes[: output.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    leaves = {n.id: grads[n.id] for n in graph.nodes if n.vjp is None and n.id in grads}
    return Gradients(graph, leaves)


# --- MLP and optimizer ----------------------------------------------------


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases per layer; tanh between layers."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    frozen: bool = False

    def __post_init__(self):
        self.layers = [(as_tensor(w), as_tensor(b)) for w, b in self.layers]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ShapeError(f"layer {i} input width {w.shape[0]} != previous output")
        if self.frozen:
            for w, b in self.layers:
                w.setflags(write=False)
                b.setflags(write=False)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self, frozen: bool | None = None) -> "MlpParams":
        return MlpParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            frozen=self.frozen if frozen is None else frozen,
        )

    def freeze(self) -> "MlpParams":
        return self.copy(frozen=True)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])

    def with_flat(self, vec) -> "MlpParams":
        vec = as_tensor(vec)
        out, pos = [], 0
        for w, b in self.layers:
            nw = vec[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            nb = vec[pos : pos + b.size].copy()
            pos += b.size
            out.append((nw.copy(), nb))
        return MlpParams(out, frozen=self.frozen)

    def equal(self, other: "MlpParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, x, graph: ValueGraph | None = None):
    """Apply the network; tanh on hidden layers, identity on the output.

    With ``graph`` the computation is recorded and a Node is returned, else the
    result is computed eagerly as an array.
    """
    xv = x.value if isinstance(x, Node) else as_tensor(x)
    width = params.layers[0][0].shape[0]
    if xv.ndim != 2 or xv.shape[1] != width:
        raise ShapeError(f"input shape {xv.shape} incompatible with input width {width}")
    last = len(params.layers) - 1
    if graph is None:
        h = xv
        for i, (w, b) in enumerate(params.layers):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        return h
    h = x if isinstance(x, Node) else graph.const(xv)
    for i, (w, b) in enumerate(graph.bind(params)):
        h = matmul(h, w) + b
        if i < last:
            h = tanh(h)
    return h


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        zeros = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        return cls(m=zeros, v=[(w.copy(), b.copy()) for w, b in zeros], **kw)


def adam_step(params: MlpParams, grads, state: AdamState, lr: float = 1e-3) -> MlpParams:
    """One bias-corrected Adam update. Returns new params; ``state`` advances in place."""
    if params.frozen:
        raise ValueError("refusing to update frozen parameters")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params.layers) or len(state.m) != len(params.layers):
        raise ShapeError("gradient / state layer count does not match params")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_layers, new_m, new_v = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(params.layers, grads, state.m, state.v):
        pair_p, pair_m, pair_v = [], [], []
        for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            if g.shape != p.shape or m.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            pair_p.append(p)
            pair_m.append(m)
            pair_v.append(v)
        new_layers.append(tuple(pair_p))
        new_m.append(tuple(pair_m))
        new_v.append(tuple(pair_v))
    state.m, state.v = new_m, new_v
    return MlpParams(new_layers)
