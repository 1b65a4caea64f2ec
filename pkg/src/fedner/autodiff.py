"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are built define-by-run: every operation evaluates eagerly as it is
recorded, so a graph is usually rebuilt for each sentence. A recorded graph
can also be re-evaluated with new leaf values through :meth:`Graph.forward`,
which is what the finite-difference checker relies on.

There is no broadcasting. Every primitive checks that its operand shapes
line up exactly and raises :class:`ShapeError` otherwise.

Example
-------
>>> g = Graph()
>>> x = g.leaf("x", 3.0)
>>> y = mul(x, x)
>>> float(y.value)
9.0
>>> float(g.backward(y)["x"])
6.0
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "Graph",
    "Node",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "total",
    "logsumexp",
    "concat",
    "reshape",
    "embed",
    "pick",
    "add_bias",
    "conv1d",
    "maxpool_time",
    "lstm",
    "crf_log_partition",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes do not match what an operation expects."""

    def __init__(self, node, expected, actual):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"{node}: expected shape {expected}, got {actual}")


class NonFiniteError(ValueError):
    pass


def tensor(values) -> np.ndarray:
    """Return `values` as a float64 array, rejecting NaN and infinities."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor values must be finite")
    return arr


class Node:
    __slots__ = ("graph", "index", "op", "parents", "attrs", "value", "grad", "name", "cache")

    def __init__(self, graph, index, op, parents, attrs, value, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.name = name
        self.cache = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op.name
        shape = None if self.value is None else self.value.shape
        return f"<Node #{self.index} {label} shape={shape}>"


class Op:
    """A primitive: a forward rule and the matching vector-Jacobian product."""

    def __init__(self, name: str, forward: Callable, backward: Optional[Callable], cached=False):
        self.name = name
        self.forward = forward
        self.backward = backward
        # cached ops stash forward intermediates on node.cache for their backward
        self.cached = cached


class Graph:
    """Tape of nodes in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: Dict[str, Node] = {}

    def leaf(self, name: str, value) -> Node:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = Node(self, len(self.nodes), _LEAF, (), {}, tensor(value), name)
        self.nodes.append(node)
        self.leaves[name] = node
        return node

    def constant(self, value) -> Node:
        node = Node(self, len(self.nodes), _CONST, (), {}, tensor(value))
        self.nodes.append(node)
        return node

    def _record(self, op: Op, parents: Sequence[Node], attrs: dict) -> Node:
        for p in parents:
            if p.graph is not self:
                raise ValueError("operands belong to different graphs")
        node = Node(self, len(self.nodes), op, tuple(parents), attrs, None)
        node.value = op.forward(node, *[p.value for p in parents], **attrs)
        self.nodes.append(node)
        return node

    def forward(self, bindings: Mapping[str, object]) -> Dict[Node, np.ndarray]:
        """Re-evaluate every node with the given leaf values."""
        missing = set(self.leaves) - set(bindings)
        if missing:
            raise KeyError(f"unbound leaves: {sorted(missing)}")
        for name, value in bindings.items():
            leaf = self.leaves[name]
            arr = tensor(value)
            if arr.shape != leaf.value.shape:
                raise ShapeError(leaf, leaf.value.shape, arr.shape)
            leaf.value = arr
        for node in self.nodes:
            node.grad = None
            if node.op is _LEAF or node.op is _CONST:
                continue
            node.value = node.op.forward(node, *[p.value for p in node.parents], **node.attrs)
        return {node: node.value for node in self.nodes}

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """Accumulate adjoints from a scalar `loss`; return leaf gradients by name."""
        if loss.value.size != 1:
            raise ShapeError(loss, (), loss.value.shape)
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or not node.parents:
                continue
            xs = [p.value for p in node.parents]
            if node.op.cached:
                grads = node.op.backward(node.grad, node.value, xs, cache=node.cache, **node.attrs)
            else:
                grads = node.op.backward(node.grad, node.value, xs, **node.attrs)
            for parent, g in zip(node.parents, grads):
                if g is None or parent.op is _CONST:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self.leaves.items()
        }


_LEAF = Op("leaf", None, None)
_CONST = Op("constant", None, None)


def _expect(node, actual, expected):
    if tuple(actual) != tuple(expected):
        raise ShapeError(node, tuple(expected), tuple(actual))


def _define(name, forward, backward, cached=False):
    op = Op(name, forward, backward, cached)

    def apply(*parents, **attrs):
        return parents[0].graph._record(op, parents, attrs)

    apply.__name__ = name
    return apply


# -- elementwise ---------------------------------------------------------------


def _same_shape(node, a, b):
    _expect(node, b.shape, a.shape)


def _add_fwd(node, a, b):
    _same_shape(node, a, b)
    return a + b


def _sub_fwd(node, a, b):
    _same_shape(node, a, b)
    return a - b


def _mul_fwd(node, a, b):
    _same_shape(node, a, b)
    return a * b


add = _define("add", _add_fwd, lambda g, out, xs: (g, g))
sub = _define("sub", _sub_fwd, lambda g, out, xs: (g, -g))
mul = _define("mul", _mul_fwd, lambda g, out, xs: (g * xs[1], g * xs[0]))
scale = _define(
    "scale", lambda node, a, c: a * c, lambda g, out, xs, c: (g * c,)
)
neg = _define("neg", lambda node, a: -a, lambda g, out, xs: (-g,))
tanh = _define("tanh", lambda node, a: np.tanh(a), lambda g, out, xs: (g * (1.0 - out * out),))


def _sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


sigmoid = _define(
    "sigmoid", lambda node, a: _sigmoid(a), lambda g, out, xs: (g * out * (1.0 - out),)
)
relu = _define(
    "relu", lambda node, a: np.maximum(a, 0.0), lambda g, out, xs: (g * (xs[0] > 0),)
)
exp = _define("exp", lambda node, a: np.exp(a), lambda g, out, xs: (g * out,))


# -- reductions and reshaping ----------------------------------------------------


total = _define(
    "total",
    lambda node, a: np.asarray(a.sum()),
    lambda g, out, xs: (np.full_like(xs[0], g),),
)


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


def _lse_bwd(g, out, xs, axis=None):
    a = xs[0]
    if axis is None:
        return (g * np.exp(a - out),)
    out_k = np.expand_dims(out, axis)
    g_k = np.expand_dims(g, axis)
    return (g_k * np.exp(a - out_k),)


logsumexp = _define("logsumexp", lambda node, a, axis=None: _lse(a, axis), _lse_bwd)


def _concat_fwd(node, *xs, axis=0):
    ref = list(xs[0].shape)
    for x in xs[1:]:
        if x.ndim != len(ref):
            raise ShapeError(node, tuple(ref), x.shape)
        for d in range(x.ndim):
            if d != axis % x.ndim and x.shape[d] != ref[d]:
                raise ShapeError(node, tuple(ref), x.shape)
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, out, xs, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_concat = _define("concat", _concat_fwd, _concat_bwd)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    return _concat(*nodes, axis=axis)


def _reshape_fwd(node, a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(node, tuple(shape), a.shape)
    return a.reshape(shape)


reshape = _define(
    "reshape", _reshape_fwd, lambda g, out, xs, shape: (g.reshape(xs[0].shape),)
)


# -- linear algebra -----------------------------------------------------------------


def _matmul_fwd(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(node, (a.shape[-1], "*"), b.shape)
    return a @ b


matmul = _define("matmul", _matmul_fwd, lambda g, out, xs: (g @ xs[1].T, xs[0].T @ g))


def _add_bias_fwd(node, x, b):
    if x.ndim != 2:
        raise ShapeError(node, ("T", b.shape[0]), x.shape)
    _expect(node, b.shape, (x.shape[1],))
    return x + b


add_bias = _define("add_bias", _add_bias_fwd, lambda g, out, xs: (g, g.sum(axis=0)))


def _embed_fwd(node, table, indices):
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[1]):
        raise IndexError(f"{node}: lookup index out of range for {table.shape[1]} columns")
    return table[:, indices].T.copy()


def _embed_bwd(g, out, xs, indices):
    grad = np.zeros_like(xs[0])
    np.add.at(grad.T, indices, g)
    return (grad,)


_embed = _define("embed", _embed_fwd, _embed_bwd)


def embed(table: Node, indices) -> Node:
    """Columns of a D x N table at `indices`, stacked as rows (len(indices) x D)."""
    return _embed(table, indices=np.asarray(indices, dtype=np.intp))


def _pick_fwd(node, a, rows, cols):
    return a[rows, cols]


def _pick_bwd(g, out, xs, rows, cols):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, (rows, cols), g)
    return (grad,)


_pick = _define("pick", _pick_fwd, _pick_bwd)


def pick(a: Node, rows, cols) -> Node:
    """Vector of the matrix entries ``a[rows[i], cols[i]]``."""
    return _pick(
        a, rows=np.asarray(rows, dtype=np.intp), cols=np.asarray(cols, dtype=np.intp)
    )


# -- convolution and pooling --------------------------------------------------------


def _segment_layout(lengths, width):
    """Row positions of each input step inside a zero-padded block layout."""
    left = (width - 1) // 2
    lengths = np.asarray(lengths, dtype=np.intp)
    block = lengths + width - 1
    starts = np.concatenate([[0], np.cumsum(block)[:-1]]) + left
    pos = np.concatenate([s + np.arange(m) for s, m in zip(starts, lengths)])
    return pos, int(block.sum())


def _conv1d_fwd(node, x, w, b, lengths=None):
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(node, ("T", "C"), x.shape)
    width, c, f = w.shape
    _expect(node, (x.shape[1],), (c,))
    _expect(node, b.shape, (f,))
    segs = (x.shape[0],) if lengths is None else lengths
    if sum(segs) != x.shape[0]:
        raise ShapeError(node, (sum(segs), c), x.shape)
    pos, rows = _segment_layout(segs, width)
    left = (width - 1) // 2
    padded = np.zeros((rows, c))
    padded[pos] = x
    starts = pos - left
    cols = np.concatenate([padded[starts + j] for j in range(width)], axis=1)
    node.cache = (pos, rows, cols)
    return cols @ w.reshape(width * c, f) + b


def _conv1d_bwd(g, out, xs, lengths=None, cache=None):
    x, w, _ = xs
    width, c, f = w.shape
    pos, rows, cols = cache
    left = (width - 1) // 2
    dw = (cols.T @ g).reshape(w.shape)
    dcols = g @ w.reshape(width * c, f).T
    dpad = np.zeros((rows, c))
    starts = pos - left
    for j in range(width):
        # window starts are distinct, so plain fancy-index accumulation is exact
        dpad[starts + j] += dcols[:, j * c : (j + 1) * c]
    return dpad[pos], dw, g.sum(axis=0)


_conv1d = _define("conv1d", _conv1d_fwd, _conv1d_bwd, cached=True)


def conv1d(x: Node, w: Node, b: Node, lengths: Optional[Sequence[int]] = None) -> Node:
    """Same-length 1-D convolution.

    `x` is T x C, `w` is width x C x F and `b` has F entries. The input is
    zero padded with (width - 1) // 2 steps on the left and the rest on the
    right. With `lengths`, the rows of `x` are treated as consecutive
    independent sequences, each padded on its own.
    """
    attrs = {} if lengths is None else {"lengths": tuple(int(m) for m in lengths)}
    return _conv1d(x, w, b, **attrs)


def _maxpool_fwd(node, x, lengths=None):
    if x.ndim != 2:
        raise ShapeError(node, ("T", "F"), x.shape)
    if lengths is None:
        return x.max(axis=0)
    if sum(lengths) != x.shape[0] or min(lengths) < 1:
        raise ShapeError(node, (sum(lengths), x.shape[1]), x.shape)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.maximum.reduceat(x, offsets, axis=0)


def _maxpool_bwd(g, out, xs, lengths=None):
    x = xs[0]
    grad = np.zeros_like(x)
    cols = np.arange(x.shape[1])
    if lengths is None:
        # argmax picks the earliest step on ties
        grad[np.argmax(x, axis=0), cols] = g
        return (grad,)
    offset = 0
    for j, m in enumerate(lengths):
        grad[offset + np.argmax(x[offset : offset + m], axis=0), cols] = g[j]
        offset += m
    return (grad,)


_maxpool = _define("maxpool_time", _maxpool_fwd, _maxpool_bwd)


def maxpool_time(x: Node, lengths: Optional[Sequence[int]] = None) -> Node:
    """Column-wise max over time: T x F -> F.

    With `lengths`, one max per consecutive segment: T x F -> len(lengths) x F.
    The adjoint goes to the earliest maximising step.
    """
    attrs = {} if lengths is None else {"lengths": tuple(int(m) for m in lengths)}
    return _maxpool(x, **attrs)


# -- recurrent layer --------------------------------------------------------------


def _lstm_fwd(node, x, wx, wh, b, reverse=False):
    if x.ndim != 2:
        raise ShapeError(node, ("T", wx.shape[0]), x.shape)
    hidden = wh.shape[0]
    _expect(node, wx.shape, (x.shape[1], 4 * hidden))
    _expect(node, wh.shape, (hidden, 4 * hidden))
    _expect(node, b.shape, (4 * hidden,))
    t_len = x.shape[0]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    hs = np.zeros((t_len, hidden))
    gates = np.zeros((t_len, 4 * hidden))
    cs = np.zeros((t_len, hidden))
    prev = np.zeros((t_len, 2, hidden))
    xw = x @ wx + b
    cand = slice(2 * hidden, 3 * hidden)
    for t in range(t_len - 1, -1, -1) if reverse else range(t_len):
        z = xw[t] + h @ wh
        a = _sigmoid(z)
        a[cand] = np.tanh(z[cand])
        prev[t, 0] = c
        prev[t, 1] = h
        c = a[hidden : 2 * hidden] * c + a[:hidden] * a[cand]
        h = a[3 * hidden :] * np.tanh(c)
        gates[t] = a
        cs[t] = c
        hs[t] = h
    node.cache = (gates, cs, prev)
    return hs


def _lstm_bwd(g_out, out, xs, reverse=False, cache=None):
    x, wx, wh, b = xs
    hidden = wh.shape[0]
    gates, cs, prev = cache
    t_len = x.shape[0]
    dz_all = np.zeros((t_len, 4 * hidden))
    dh_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    tcs = np.tanh(cs)
    ds = gates * (1.0 - gates)
    ds[:, 2 * hidden : 3 * hidden] = 1.0 - gates[:, 2 * hidden : 3 * hidden] ** 2
    for t in range(t_len) if reverse else range(t_len - 1, -1, -1):
        i = gates[t, :hidden]
        f = gates[t, hidden : 2 * hidden]
        g = gates[t, 2 * hidden : 3 * hidden]
        o = gates[t, 3 * hidden :]
        dh = g_out[t] + dh_next
        dc = dh * o * (1.0 - tcs[t] ** 2) + dc_next
        dz = np.concatenate([dc * g, dc * prev[t, 0], dc * i, dh * tcs[t]]) * ds[t]
        dz_all[t] = dz
        dh_next = wh @ dz
        dc_next = dc * f
    dwh = prev[:, 1].T @ dz_all
    return dz_all @ wx.T, x.T @ dz_all, dwh, dz_all.sum(axis=0)


lstm = _define("lstm", _lstm_fwd, _lstm_bwd, cached=True)
lstm.__doc__ = """Single-direction LSTM over a T x D sequence, returning T x H states.

Gates are packed as (input, forget, candidate, output) along the 4H axis of
`wx` (D x 4H), `wh` (H x 4H) and `b` (4H). With ``reverse=True`` the sequence
is consumed back to front and the states are returned in original order.
"""


# -- linear-chain CRF normaliser ----------------------------------------------


def _crf_alpha_beta(em, trans):
    k, n = em.shape
    start, stop = n, n + 1
    inner = trans[:n, :n]
    alpha = np.zeros((k, n))
    beta = np.zeros((k, n))
    alpha[0] = trans[start, :n] + em[0]
    for t in range(1, k):
        a = alpha[t - 1][:, None] + inner
        m = a.max(axis=0)
        alpha[t] = m + np.log(np.exp(a - m).sum(axis=0)) + em[t]
    beta[k - 1] = trans[:n, stop]
    for t in range(k - 2, -1, -1):
        a = inner + (em[t + 1] + beta[t + 1])
        m = a.max(axis=1)
        beta[t] = m + np.log(np.exp(a - m[:, None]).sum(axis=1))
    log_z = _lse(alpha[k - 1] + trans[:n, stop], None)
    return alpha, beta, log_z


def _crf_fwd(node, em, trans):
    if em.ndim != 2 or em.shape[0] < 1:
        raise ShapeError(node, ("k>=1", "L"), em.shape)
    n = em.shape[1]
    _expect(node, trans.shape, (n + 2, n + 2))
    node.cache = _crf_alpha_beta(em, trans)
    return np.asarray(node.cache[2])


def _crf_bwd(g, out, xs, cache=None):
    em, trans = xs
    k, n = em.shape
    start, stop = n, n + 1
    alpha, beta, log_z = cache
    node_marg = np.exp(alpha + beta - log_z)
    dtrans = np.zeros_like(trans)
    dtrans[start, :n] = node_marg[0]
    dtrans[:n, stop] = node_marg[k - 1]
    inner = trans[:n, :n]
    for t in range(1, k):
        edge = alpha[t - 1][:, None] + inner + (em[t] + beta[t])[None, :] - log_z
        dtrans[:n, :n] += np.exp(edge)
    return g * node_marg, g * dtrans


crf_log_partition = _define("crf_log_partition", _crf_fwd, _crf_bwd, cached=True)
crf_log_partition.__doc__ = """Log normaliser of a linear-chain CRF.

`em` is k x L; `trans` is (L+2) x (L+2) where index L is START and L+1 is
STOP. Only the START row and STOP column of the boundary states are read.
"""


# -- gradient checking -------------------------------------------------------------


def finite_difference_check(graph: Graph, loss: Node, leaf: str, h: float = 1e-5) -> float:
    """Max over the entries of `leaf` of |analytic - central difference| / max(1, |analytic|).

    The graph is restored to its original leaf values before returning.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {name: node.value.copy() for name, node in graph.leaves.items()}
    graph.forward(base)
    analytic = graph.backward(loss)[leaf]
    x0 = base[leaf]
    worst = 0.0
    for idx in np.ndindex(x0.shape):
        bindings = dict(base)
        xp = x0.copy()
        xp[idx] += h
        bindings[leaf] = xp
        graph.forward(bindings)
        fp = float(loss.value)
        xm = x0.copy()
        xm[idx] -= h
        bindings[leaf] = xm
        graph.forward(bindings)
        fm = float(loss.value)
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    graph.forward(base)
    return worst
