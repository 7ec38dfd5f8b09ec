"""Dense reverse-mode autodiff on float64 numpy arrays.

Every operation records a node with parent links and a backward closure;
``backward(loss)`` walks the graph in reverse topological order and leaves
``.grad`` on every reachable node. Graph construction is single-threaded per
graph; evaluated nodes are immutable afterwards.
"""

from __future__ import annotations

import numpy as np

# When True every op asserts its output is finite. Off by default; tests and
# debugging flip it on.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "parents", "grad", "_backward", "name")

    def __init__(self, data, parents=(), name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad = None
        self._backward = None
        self.name = name
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in node {name or '<op>'}")

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Parameter(Tensor):
    """Named leaf tensor updated by an optimizer."""

    def __init__(self, data, name):
        super().__init__(data, (), name)


def _topo_order(root):
    """Parents-before-children ordering of all nodes reachable from root."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(loss, seed=None):
    """Backpropagate from ``loss``, accumulating ``.grad`` on reachable nodes.

    ``loss`` must be scalar unless an explicit ``seed`` gradient of matching
    shape is given (used when a sub-graph receives its output gradient from
    elsewhere, e.g. embedding gradients pushed back over the wire).
    """
    if seed is None:
        if loss.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        seed = np.array(1.0)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.data.shape:
            raise ShapeError(
                f"seed gradient shape {seed.shape} != output shape {loss.data.shape}"
            )
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = seed.copy()
    for node in reversed(order):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def parameter_gradients(params):
    """Map name -> gradient for the given parameters (zeros if untouched)."""
    out = {}
    for p in params:
        out[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def constant(data, name=""):
    """Leaf node that never requires a gradient."""
    return Tensor(data, (), name)


def _node(data, parents, bwd, name=""):
    t = Tensor(data, parents, name)
    t._backward = bwd
    return t


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def bwd(g):
        a.accumulate(g)
        b.accumulate(g)

    return _node(a.data + b.data, (a, b), bwd, "add")


def scale(a, c):
    """Multiply by a python float constant."""
    c = float(c)

    def bwd(g):
        a.accumulate(g * c)

    return _node(a.data * c, (a,), bwd, "scale")


def vsum(a):
    """Sum of all elements -> scalar."""

    def bwd(g):
        a.accumulate(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), bwd, "vsum")


def mul_const(a, c):
    """Elementwise product with a constant array of the same shape.

    sum(mul_const(x, c)) turns a downstream gradient c into a scalar root, so
    several sub-graphs can be backpropagated in one pass.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.data.shape:
        raise ShapeError(f"mul_const: shapes {a.data.shape} and {c.shape} differ")

    def bwd(g):
        a.accumulate(g * c)

    return _node(a.data * c, (a,), bwd, "mul_const")


def linear(x, w, b):
    """Affine map ``w @ x + b`` for a vector x, or ``x @ w.T + b`` row-wise
    for a matrix of row vectors.

    x: [n] or [B, n]; w: [m, n]; b: [m].
    """
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"linear: weight {w.data.shape} and bias {b.data.shape} do not conform"
        )
    if x.data.ndim == 1:
        if x.data.shape[0] != w.data.shape[1]:
            raise ShapeError(
                f"linear: input {x.data.shape} does not match weight {w.data.shape}"
            )
        out = w.data @ x.data + b.data

        def bwd(g):
            w.accumulate(np.outer(g, x.data))
            b.accumulate(g)
            x.accumulate(w.data.T @ g)

        return _node(out, (x, w, b), bwd, "linear")
    if x.data.ndim == 2:
        if x.data.shape[1] != w.data.shape[1]:
            raise ShapeError(
                f"linear: input {x.data.shape} does not match weight {w.data.shape}"
            )
        out = x.data @ w.data.T + b.data

        def bwd(g):
            w.accumulate(g.T @ x.data)
            b.accumulate(g.sum(axis=0))
            x.accumulate(g @ w.data)

        return _node(out, (x, w, b), bwd, "linear")
    raise ShapeError(f"linear: input must be 1-D or 2-D, got {x.data.shape}")


def prelu(x, alpha):
    """max(0, x) + alpha * min(0, x) with a per-channel slope.

    alpha broadcasts over rows: shape [d] against x [d] or [B, d].
    """
    if alpha.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"prelu: alpha {alpha.data.shape} does not match channels of {x.data.shape}"
        )
    pos = x.data > 0
    out = np.where(pos, x.data, alpha.data * x.data)

    def bwd(g):
        x.accumulate(np.where(pos, g, alpha.data * g))
        neg = np.where(pos, 0.0, x.data * g)
        alpha.accumulate(neg if x.data.ndim == 1 else neg.sum(axis=0))

    return _node(out, (x, alpha), bwd, "prelu")


def sigmoid_cross_entropy(logits, labels):
    """Per-element stable binary cross-entropy from logits.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)); d/dz = sigmoid(z) - y.
    ``labels`` is a plain 0/1 array, not a node.
    """
    z = logits.data
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"loss: logits {z.shape} and labels {y.shape} differ")
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))

    def bwd(g):
        logits.accumulate(g * (sig - y))

    return _node(out, (logits,), bwd, "sigmoid_ce")


def softmax(v):
    """Shift-invariant softmax of a vector."""
    if v.data.ndim != 1 or v.data.shape[0] < 1:
        raise ShapeError(f"softmax: expected a non-empty vector, got {v.data.shape}")
    e = np.exp(v.data - v.data.max())
    out = e / e.sum()

    def bwd(g):
        v.accumulate(out * (g - np.dot(g, out)))

    return _node(out, (v,), bwd, "softmax")


def rows(x, idx):
    """Gather rows of a matrix (or elements of a vector) by integer index."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return _node(out, (x,), bwd, "rows")


def segment_sum(x, seg, num_segments):
    """Sum rows of x [R, d] into segments -> [num_segments, d].

    Empty segments yield zero rows.
    """
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((num_segments,) + x.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, x.data)

    def bwd(g):
        x.accumulate(g[seg])

    return _node(out, (x,), bwd, "segment_sum")


def segment_max(x, seg, num_segments):
    """Per-segment elementwise max of rows of x [R, d] -> [num_segments, d].

    Empty segments yield zero rows; gradient routes to the first argmax row.
    """
    seg = np.asarray(seg, dtype=np.int64)
    R, d = x.data.shape
    out = np.zeros((num_segments, d), dtype=np.float64)
    argmax = np.full((num_segments, d), -1, dtype=np.int64)
    filled = np.zeros(num_segments, dtype=bool)
    for r in range(R):
        s = seg[r]
        if not filled[s]:
            out[s] = x.data[r]
            argmax[s] = r
            filled[s] = True
        else:
            better = x.data[r] > out[s]
            out[s] = np.where(better, x.data[r], out[s])
            argmax[s] = np.where(better, r, argmax[s])

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        for s in range(num_segments):
            if not filled[s]:
                continue
            np.add.at(x.grad[:, :], (argmax[s], np.arange(d)), g[s])

    return _node(out, (x,), bwd, "segment_max")


def segment_softmax(s, seg, num_segments):
    """Softmax of a score vector s [R] independently within each segment."""
    seg = np.asarray(seg, dtype=np.int64)
    if s.data.ndim != 1:
        raise ShapeError(f"segment_softmax: expected vector scores, got {s.data.shape}")
    hi = np.full(num_segments, -np.inf)
    np.maximum.at(hi, seg, s.data)
    e = np.exp(s.data - hi[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def bwd(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, seg, g * out)
        s.accumulate(out * (g - dot[seg]))

    return _node(out, (s,), bwd, "segment_softmax")


def col_scale(x, w):
    """Scale each row of x [R, d] by w [R]."""
    if x.data.shape[:1] != w.data.shape:
        raise ShapeError(f"col_scale: rows {x.data.shape} vs weights {w.data.shape}")
    out = x.data * w.data[:, None]

    def bwd(g):
        x.accumulate(g * w.data[:, None])
        w.accumulate((g * x.data).sum(axis=1))

    return _node(out, (x, w), bwd, "col_scale")


def hstack(parts):
    """Concatenate matrices [B, d_i] (or vectors [d_i]) along the last axis."""
    axis = parts[0].data.ndim - 1
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            p.accumulate(g[..., off : off + w])
            off += w

    return _node(out, tuple(parts), bwd, "hstack")


def scatter_concat(x, seg, pos, num_segments, capacity):
    """Place row i of x [R, d] at slot ``pos[i]`` of sample ``seg[i]`` in a
    zero-padded [num_segments, capacity * d] layout."""
    seg = np.asarray(seg, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    if np.any(pos >= capacity) or np.any(pos < 0):
        raise ShapeError(f"scatter_concat: slot out of range for capacity {capacity}")
    R, d = x.data.shape
    out = np.zeros((num_segments, capacity * d), dtype=np.float64)
    cols = pos[:, None] * d + np.arange(d)[None, :]
    np.add.at(out, (seg[:, None], cols), x.data)

    def bwd(g):
        x.accumulate(g[seg[:, None], cols])

    return _node(out, (x,), bwd, "scatter_concat")


def rowwise_dot(u, v):
    """Per-row inner product of two [B, d] matrices -> [B]."""
    if u.data.shape != v.data.shape or u.data.ndim != 2:
        raise ShapeError(f"rowwise_dot: shapes {u.data.shape} vs {v.data.shape}")
    out = np.einsum("ij,ij->i", u.data, v.data)

    def bwd(g):
        u.accumulate(g[:, None] * v.data)
        v.accumulate(g[:, None] * u.data)

    return _node(out, (u, v), bwd, "rowwise_dot")


def squeeze1(x):
    """View an [R, 1] matrix as a vector [R]."""
    if x.data.ndim != 2 or x.data.shape[1] != 1:
        raise ShapeError(f"squeeze1: expected [R, 1], got {x.data.shape}")

    def bwd(g):
        x.accumulate(g[:, None])

    return _node(x.data[:, 0], (x,), bwd, "squeeze1")
