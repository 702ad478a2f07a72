"""Dense 2-D reverse-mode differentiation on top of numpy.

Every value is a float64 matrix.  Operations on tensors that need gradients
record their parents and a local gradient rule; :func:`backward` replays those
records in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True

SQRT_FLOOR = 1e-12


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.values[0, 0])

    def numpy(self):
        return self.values.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scalar_scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scalar_scale(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _make(values, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap a forward result; `rule(g)` returns one gradient (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    # only (1, n) and (m, 1) broadcasting is supported
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    (m1, n1), (m2, n2) = a.shape, b.shape
    ok_rows = m1 == m2 or m1 == 1 or m2 == 1
    ok_cols = n1 == n2 or n1 == 1 or n2 == 1
    if not (ok_rows and ok_cols):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "hadamard")
    av, bv = a.values, b.values

    def rule(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), rule)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two equally shaped tensors, as a column."""
    if a.shape != b.shape:
        raise ValueError(f"row_dot: shapes differ, {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    out = np.einsum("ij,ij->i", av, bv).reshape(-1, 1)

    def rule(g):
        return (g * bv if a.requires_grad else None,
                g * av if b.requires_grad else None)

    return _make(out, (a, b), rule)


def scalar_scale(x: Tensor, c: float) -> Tensor:
    return _make(x.values * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.values + c, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.values > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise ValueError("log of a non-positive entry")
    xv = x.values
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; inputs below 1e-12 are rejected when a gradient is needed."""
    if x.requires_grad and np.any(x.values < SQRT_FLOOR):
        raise ValueError("sqrt gradient requested at an input below 1e-12")
    y = np.sqrt(x.values)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.values)
    return _make(np.abs(x.values), (x,), lambda g: (g * s,))


# --------------------------------------------------------------------------
# reductions and shape
# --------------------------------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    if axis is None:
        out = np.array([[x.values.sum()]])
        return _make(out, (x,), lambda g: (np.full(shape, g[0, 0]),))
    out = x.values.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.values.size if axis is None else x.shape[axis]
    return scalar_scale(sum(x, axis), 1.0 / count)


def transpose(x: Tensor) -> Tensor:
    return _make(x.values.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    shape = x.shape
    return _make(x.values.reshape(rows, cols), (x,), lambda g: (g.reshape(shape),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = np.cumsum([0] + [p.cols for p in parts])
    out = np.concatenate([p.values for p in parts], axis=1)
    return _make(out, tuple(parts),
                 lambda g: tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts))))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    heights = np.cumsum([0] + [p.rows for p in parts])
    out = np.concatenate([p.values for p in parts], axis=0)
    return _make(out, tuple(parts),
                 lambda g: tuple(g[heights[i]:heights[i + 1]] for i in range(len(parts))))


def _scatter_rows(g, idx, n_rows):
    # sparse matrix product beats np.add.at by a wide margin here
    m = len(idx)
    if m == 0:
        return np.zeros((n_rows, g.shape[1]))
    scatter = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n_rows, m))
    return np.asarray(scatter @ g)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.rows
    return _make(x.values[idx], (x,), lambda g: (_scatter_rows(g, idx, n),))


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of `x` that share a segment id; output has one row per segment."""
    segments = np.asarray(segments, dtype=np.int64)
    out = _scatter_rows(x.values, segments, n_segments)
    return _make(out, (x,), lambda g: (g[segments],))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.values[:, start:stop], (x,), rule)


def spmm(adj, x: Tensor) -> Tensor:
    """Sparse (constant) matrix times dense tensor."""
    if adj.shape[1] != x.rows:
        raise ValueError(f"spmm: {adj.shape} against {x.shape}")
    adj_t = adj.T.tocsr()
    return _make(np.asarray(adj @ x.values), (x,), lambda g: (np.asarray(adj_t @ g),))


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit length; all-zero rows stay zero."""
    xv = x.values
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, SQRT_FLOOR)
    y = xv / safe
    live = norms >= SQRT_FLOOR

    def rule(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        gx = (g - np.where(live, y * proj, 0.0)) / safe
        return (gx,)

    return _make(y, (x,), rule)


def _cofactors4(a):
    """Determinants and cofactor matrices for a stack of 4x4 matrices (B, 4, 4)."""
    a00, a01, a02, a03 = a[:, 0, 0], a[:, 0, 1], a[:, 0, 2], a[:, 0, 3]
    a10, a11, a12, a13 = a[:, 1, 0], a[:, 1, 1], a[:, 1, 2], a[:, 1, 3]
    a20, a21, a22, a23 = a[:, 2, 0], a[:, 2, 1], a[:, 2, 2], a[:, 2, 3]
    a30, a31, a32, a33 = a[:, 3, 0], a[:, 3, 1], a[:, 3, 2], a[:, 3, 3]

    # 2x2 minors of the top and bottom row pairs
    s0 = a00 * a11 - a10 * a01
    s1 = a00 * a12 - a10 * a02
    s2 = a00 * a13 - a10 * a03
    s3 = a01 * a12 - a11 * a02
    s4 = a01 * a13 - a11 * a03
    s5 = a02 * a13 - a12 * a03
    c5 = a22 * a33 - a32 * a23
    c4 = a21 * a33 - a31 * a23
    c3 = a21 * a32 - a31 * a22
    c2 = a20 * a33 - a30 * a23
    c1 = a20 * a32 - a30 * a22
    c0 = a20 * a31 - a30 * a21

    det = s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0

    adj = np.empty_like(a)
    adj[:, 0, 0] = a11 * c5 - a12 * c4 + a13 * c3
    adj[:, 0, 1] = -a01 * c5 + a02 * c4 - a03 * c3
    adj[:, 0, 2] = a31 * s5 - a32 * s4 + a33 * s3
    adj[:, 0, 3] = -a21 * s5 + a22 * s4 - a23 * s3
    adj[:, 1, 0] = -a10 * c5 + a12 * c2 - a13 * c1
    adj[:, 1, 1] = a00 * c5 - a02 * c2 + a03 * c1
    adj[:, 1, 2] = -a30 * s5 + a32 * s2 - a33 * s1
    adj[:, 1, 3] = a20 * s5 - a22 * s2 + a23 * s1
    adj[:, 2, 0] = a10 * c4 - a11 * c2 + a13 * c0
    adj[:, 2, 1] = -a00 * c4 + a01 * c2 - a03 * c0
    adj[:, 2, 2] = a30 * s4 - a31 * s2 + a33 * s0
    adj[:, 2, 3] = -a20 * s4 + a21 * s2 - a23 * s0
    adj[:, 3, 0] = -a10 * c3 + a11 * c1 - a12 * c0
    adj[:, 3, 1] = a00 * c3 - a01 * c1 + a02 * c0
    adj[:, 3, 2] = -a30 * s3 + a31 * s1 - a32 * s0
    adj[:, 3, 3] = a20 * s3 - a21 * s1 + a22 * s0
    # cofactor matrix is the transposed adjugate
    return det, np.transpose(adj, (0, 2, 1))


def det4(g: Tensor) -> Tensor:
    """Determinant of a 4x4 tensor by cofactor expansion."""
    if g.shape != (4, 4):
        raise ValueError(f"det4 needs a 4x4 input, got {g.shape}")
    det, cof = _cofactors4(g.values.reshape(1, 4, 4))
    cof = cof[0]
    return _make(det.reshape(1, 1), (g,), lambda gr: (gr[0, 0] * cof,))


def det4_rows(g: Tensor) -> Tensor:
    """Row-batched det4: each row of a (B, 16) input is a row-major 4x4 matrix."""
    if g.cols != 16:
        raise ValueError(f"det4_rows needs 16 columns, got {g.shape}")
    det, cof = _cofactors4(g.values.reshape(-1, 4, 4))
    cof = cof.reshape(-1, 16)
    return _make(det.reshape(-1, 1), (g,), lambda gr: (gr * cof,))


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

def row_softmax(x: Tensor, scale: float = 1.0) -> Tensor:
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    z = x.values * scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (scale * p * (g - inner),)

    return _make(p, (x,), rule)


def logsumexp_rows(x: Tensor) -> Tensor:
    xv = x.values
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return _make(m + np.log(s), (x,), lambda g: (g * p,))


def segment_softmax(x: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of a column of scores within groups of rows sharing a segment id."""
    if x.cols != 1:
        raise ValueError("segment_softmax takes a column of scores")
    segments = np.asarray(segments, dtype=np.int64)
    xv = x.values[:, 0]
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, xv)
    e = np.exp(xv - seg_max[segments])
    denom = np.bincount(segments, weights=e, minlength=n_segments)
    p = (e / denom[segments]).reshape(-1, 1)

    def rule(g):
        gp = (g * p)[:, 0]
        inner = np.bincount(segments, weights=gp, minlength=n_segments)
        return (p * (g - inner[segments].reshape(-1, 1)),)

    return _make(p, (x,), rule)


# --------------------------------------------------------------------------
# per-block attention helpers: rows grouped in consecutive blocks of `block`
# --------------------------------------------------------------------------

def block_scores(q: Tensor, k: Tensor, block: int, heads: int = 1) -> Tensor:
    """Pairwise inner products inside each block of `block` consecutive rows.

    Columns of `q` and `k` are split into `heads` equal groups.  The output
    has `heads * block` columns: out[e*block + i, h*block + j] is the dot of
    query row i and key row j of block e, restricted to head h's columns.
    """
    if q.shape != k.shape or q.rows % block or q.cols % heads:
        raise ValueError(f"block_scores: bad shapes {q.shape}, {k.shape} for block {block}")
    dh = q.cols // heads
    qv = q.values.reshape(-1, block, heads, dh)
    kv = k.values.reshape(-1, block, heads, dh)
    out = np.einsum("eihd,ejhd->eihj", qv, kv).reshape(q.rows, heads * block)

    def rule(g):
        g4 = g.reshape(-1, block, heads, block)
        gq = np.einsum("eihj,ejhd->eihd", g4, kv).reshape(q.shape) if q.requires_grad else None
        gk = np.einsum("eihj,eihd->ejhd", g4, qv).reshape(k.shape) if k.requires_grad else None
        return gq, gk

    return _make(out, (q, k), rule)


def block_apply(p: Tensor, v: Tensor, block: int, heads: int = 1) -> Tensor:
    """Mix value rows inside each block with that block's weights, head by head.

    `p` is laid out as produced by :func:`block_scores`; `v` has `heads`
    equal column groups.
    """
    if p.cols != block * heads or p.rows != v.rows or v.rows % block or v.cols % heads:
        raise ValueError(f"block_apply: bad shapes {p.shape}, {v.shape} for block {block}")
    dh = v.cols // heads
    p4 = p.values.reshape(-1, block, heads, block)
    v4 = v.values.reshape(-1, block, heads, dh)
    out = np.einsum("eihj,ejhd->eihd", p4, v4).reshape(v.shape)

    def rule(g):
        g4 = g.reshape(-1, block, heads, dh)
        gp = np.einsum("eihd,ejhd->eihj", g4, v4).reshape(p.shape) if p.requires_grad else None
        gv = np.einsum("eihj,eihd->ejhd", p4, g4).reshape(v.shape) if v.requires_grad else None
        return gp, gv

    return _make(out, (p, v), rule)


# --------------------------------------------------------------------------
# layers with their own gradient rules
# --------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def rule(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(out, (x, gain, bias), rule)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.values * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def record(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of the recorded nodes that feed `loss`."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> int:
    """Populate `.grad` on every gradient-requiring ancestor of a scalar loss.

    Gradients accumulate across calls.  Returns the number of nodes visited.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return 0
    order = record(loss)
    pending = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return len(order)


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------

def save_params(path, params: dict[str, Tensor]) -> None:
    """Little-endian: u32 count, then per entry u32 name length, name, u32 rows, u32 cols, f64 data."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", t.rows, t.cols))
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_params(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        data = fh.read()
    (count,), pos = struct.unpack_from("<I", data, 0), 4
    out = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + length].decode("utf-8")
        pos += length
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        n = rows * cols
        vals = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(rows, cols)
        pos += 8 * n
        out[name] = parameter(vals.astype(np.float64), name=name)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes in checkpoint")
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
