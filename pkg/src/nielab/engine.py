"""Reverse-mode tape autodiff over float64 numpy arrays.

A Record captures one forward pass as a flat list of primitive-op nodes;
backward() walks it once in reverse. Everything is float64: the gradient
verification tolerances used throughout the test suite need the headroom.

Broadcasting is restricted to size-1 axes of equal-rank operands; there is
no implicit rank promotion. Records are single-threaded objects -- distinct
records may live on distinct workers, parameters are only read during the
forward pass.
"""

from __future__ import annotations

import threading

import numpy as np

from . import backend


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    pass


class DTensor:
    """Dense float64 array, optionally bound to a node of the active Record."""

    __slots__ = ("data", "node_id", "_rec")

    def __init__(self, data, node_id=None, _rec=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.node_id = node_id
        self._rec = _rec

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"DTensor(shape={self.data.shape}{tag})"


def tensor(data):
    """Wrap data in a DTensor outside any recording."""
    return DTensor(data)


class _Node:
    __slots__ = ("op", "inputs", "shape", "aux", "value")

    def __init__(self, op, inputs, aux, value):
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.value = value
        self.shape = value.shape


_active = threading.local()


def _current():
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Record:
    """One recorded forward pass: topologically ordered nodes + parameter registry.

    Use as a context manager; ops called inside the block append nodes.
    backward() consumes the record -- a fresh forward pass is needed before
    differentiating again.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}      # node_id -> DTensor
        self._lifted = {}     # id(DTensor) -> node_id for constants/parameters
        self._keepalive = []  # pin lifted tensors so id() stays unique
        self.consumed = False

    def __enter__(self):
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _active.stack.pop()
        return False

    def _append(self, op, inputs, aux, value):
        if self.consumed:
            raise EngineError("record already consumed by backward(); start a fresh forward pass")
        self.nodes.append(_Node(op, inputs, aux, value))
        return len(self.nodes) - 1

    def _node_of(self, t):
        """Node id of t in this record, lifting it as a leaf if needed."""
        if t.node_id is not None and t._rec is self:
            return t.node_id
        nid = self._lifted.get(id(t))
        if nid is None:
            nid = self._append("leaf", (), None, t.data)
            self._lifted[id(t)] = nid
            self._keepalive.append(t)
        return nid

    def watch(self, t):
        """Register t as a parameter: backward() will always report its gradient."""
        nid = self._node_of(t)
        self.params[nid] = t
        return t

    def grad(self, grads, t):
        """Look up the gradient of t in a map returned by backward()."""
        if t.node_id is not None and t._rec is self:
            nid = t.node_id
        else:
            nid = self._lifted.get(id(t))
        if nid is None:
            raise EngineError("tensor was never used in this record")
        return grads.get(nid, DTensor(np.zeros(t.shape)))

    def backward(self, loss):
        """Reverse sweep from a scalar loss; returns {node_id: DTensor gradient}.

        Every watched parameter gets an entry (zeros when unused). The record
        is consumed afterwards.
        """
        if self.consumed:
            raise EngineError("backward() already called on this record")
        if loss.node_id is None or loss._rec is not self:
            raise EngineError("loss does not belong to this record")
        if loss.data.size != 1:
            raise EngineError(f"loss must be scalar-shaped, got shape {loss.data.shape}")
        self.consumed = True

        grads = {loss.node_id: np.ones_like(self.nodes[loss.node_id].value)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            in_vals = [self.nodes[i].value for i in node.inputs]
            for in_id, gin in zip(node.inputs, _BACKWARD[node.op](g, node, in_vals)):
                if gin is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = gin if acc is None else acc + gin

        out = {nid: DTensor(g) for nid, g in grads.items()}
        for nid, p in self.params.items():
            if nid not in out:
                out[nid] = DTensor(np.zeros(p.shape))
        return out

    def replay(self, t):
        """Recompute t's value by replaying the forward pass from the leaves.

        Stored node values are untouched; replaying with identical leaves
        reproduces the recorded output bitwise.
        """
        if t.node_id is None or t._rec is not self:
            raise EngineError("tensor does not belong to this record")
        values = []
        for node in self.nodes[: t.node_id + 1]:
            if node.op == "leaf":
                values.append(node.value)
            else:
                values.append(_FORWARD[node.op]([values[i] for i in node.inputs], node.aux))
        return values[t.node_id]


def _record_op(op, inputs, aux=None):
    """Run one primitive: eager when no record is active, else append a node."""
    rec = _current()
    arrays = [t.data for t in inputs]
    for t in inputs:
        if t.data.size == 0:
            raise EngineError(f"{op}: empty tensor operand with shape {t.data.shape}")
    if rec is None:
        return DTensor(_FORWARD[op](arrays, aux))
    ids = tuple(rec._node_of(t) for t in inputs)
    value = _FORWARD[op](arrays, aux)
    nid = rec._append(op, ids, aux, value)
    out = DTensor.__new__(DTensor)
    out.data = value
    out.node_id = nid
    out._rec = rec
    return out


def _check_broadcast(op, sa, sb):
    if len(sa) != len(sb):
        raise ShapeMismatch(f"{op}: rank mismatch between shapes {sa} and {sb}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"{op}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(grad, shape):
    """Sum grad over the size-1 axes that were broadcast during the forward op."""
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive forward/backward implementations. Forward functions take plain
# numpy arrays so Record.replay can reuse them.

def _fw_matmul(vals, aux):
    return np.matmul(vals[0], vals[1])


def _bw_matmul(g, node, vals):
    a, b = vals
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if ga.ndim > a.ndim:
        ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
    elif ga.shape != a.shape:
        ga = _unbroadcast(ga, a.shape)
    if gb.ndim > b.ndim:
        gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
    elif gb.shape != b.shape:
        gb = _unbroadcast(gb, b.shape)
    return ga, gb


def _fw_softmax(vals, aux):
    x = vals[0]
    rows = x.reshape(-1, x.shape[-1])
    return backend.masked_softmax_fwd(rows, aux).reshape(x.shape)


def _bw_softmax(g, node, vals):
    last = node.value.shape[-1]
    probs = node.value.reshape(-1, last)
    dx = backend.masked_softmax_bwd(probs, g.reshape(-1, last))
    return (dx.reshape(node.value.shape),)


def _fw_concat(vals, aux):
    return np.concatenate(vals, axis=aux)


def _bw_concat(g, node, vals):
    sizes = [v.shape[node.aux] for v in vals]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=node.aux))


def _fw_sum(vals, aux):
    axis, keepdims = aux
    return np.sum(vals[0], axis=axis, keepdims=keepdims)


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def _bw_sum(g, node, vals):
    axis, keepdims = node.aux
    return (_expand_reduced(g, vals[0].shape, axis, keepdims).copy(),)


def _fw_mean(vals, aux):
    axis, keepdims = aux
    return np.mean(vals[0], axis=axis, keepdims=keepdims)


def _bw_mean(g, node, vals):
    axis, keepdims = node.aux
    count = vals[0].size if axis is None else vals[0].shape[axis]
    return (_expand_reduced(g, vals[0].shape, axis, keepdims) / count,)


def _bw_slice(g, node, vals):
    dz = np.zeros(vals[0].shape)
    dz[node.aux] += g
    return (dz,)


def _fw_interp(vals, aux):
    idx, w, _ = aux
    return backend.interp_gather(vals[0], idx, w)


def _bw_interp(g, node, vals):
    idx, w, n_grid = node.aux
    return (backend.interp_scatter(g, idx, w, n_grid),)


def _bw_rowmatvec(g, node, vals):
    kmat, vec = vals
    return (backend.rowmatvec_bwd_k(g, vec), backend.rowmatvec_bwd_v(kmat, g))


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "smul": lambda v, a: v[0] * a,
    "matmul": _fw_matmul,
    "tanh": lambda v, a: np.tanh(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "exp": lambda v, a: np.exp(v[0]),
    "softmax": _fw_softmax,
    "concat": _fw_concat,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "slice": lambda v, a: v[0][a].copy(),
    "reshape": lambda v, a: v[0].reshape(a),
    "transpose": lambda v, a: np.ascontiguousarray(np.swapaxes(v[0], -1, -2)),
    "interp": _fw_interp,
    "rowmatvec": lambda v, a: backend.rowmatvec(v[0], v[1]),
}

_BACKWARD = {
    "add": lambda g, n, v: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda g, n, v: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "mul": lambda g, n, v: (
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ),
    "smul": lambda g, n, v: (g * n.aux,),
    "matmul": _bw_matmul,
    "tanh": lambda g, n, v: (g * (1.0 - n.value * n.value),),
    "relu": lambda g, n, v: (g * (v[0] > 0.0),),
    "exp": lambda g, n, v: (g * n.value,),
    "softmax": _bw_softmax,
    "concat": _bw_concat,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "slice": _bw_slice,
    "reshape": lambda g, n, v: (g.reshape(v[0].shape),),
    "transpose": lambda g, n, v: (np.swapaxes(g, -1, -2),),
    "interp": _bw_interp,
    "rowmatvec": _bw_rowmatvec,
}


# ---------------------------------------------------------------------------
# Public op surface.

def add(a, b):
    _check_broadcast("add", a.shape, b.shape)
    return _record_op("add", (a, b))


def sub(a, b):
    _check_broadcast("sub", a.shape, b.shape)
    return _record_op("sub", (a, b))


def mul(a, b):
    _check_broadcast("mul", a.shape, b.shape)
    return _record_op("mul", (a, b))


def smul(a, c):
    return _record_op("smul", (a,), float(c))


def matmul(a, b):
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeMismatch(f"matmul: operands must be at least rank 2, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeMismatch(f"matmul: inner dimensions differ between {sa} and {sb}")
    if len(sa) > 2 and len(sb) > 2:
        _check_broadcast("matmul", sa[:-2], sb[:-2])
    return _record_op("matmul", (a, b))


def tanh(a):
    return _record_op("tanh", (a,))


def relu(a):
    return _record_op("relu", (a,))


def exp(a):
    return _record_op("exp", (a,))


def softmax(a, mask=None):
    """Softmax over the last axis; mask entries equal to False get weight exactly 0.

    mask may match a.shape, or be a single [K, L] matrix shared across the
    leading axes (no per-batch copy is made)."""
    if mask is not None:
        mask = np.ascontiguousarray(np.asarray(mask), dtype=np.uint8)
        if mask.shape == a.shape:
            mask = mask.reshape(-1, a.shape[-1])
        elif mask.shape != a.shape[-2:]:
            raise ShapeMismatch(
                f"softmax: mask shape {mask.shape} fits neither {a.shape} "
                f"nor {a.shape[-2:]}"
            )
    return _record_op("softmax", (a,), mask)


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        s = t.shape
        if len(s) != len(ref) or any(
            i != axis % len(ref) and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat: shapes {ref} and {s} differ off axis {axis}")
    return _record_op("concat", tuple(tensors), axis)


def tsum(a, axis=None, keepdims=False):
    return _record_op("sum", (a,), (axis, keepdims))


def tmean(a, axis=None, keepdims=False):
    return _record_op("mean", (a,), (axis, keepdims))


def tslice(a, key):
    if not isinstance(key, tuple):
        key = (key,)
    return _record_op("slice", (a,), key)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatch(f"reshape: cannot view shape {a.shape} as {shape}")
    return _record_op("reshape", (a,), shape)


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose: needs rank >= 2, got shape {a.shape}")
    return _record_op("transpose", (a,))


def interp(values, idx, w, n_grid):
    """Differentiable linear-combination gather of adjacent grid rows.

    values: [B, N, d]; out[b, m] = (1-w[m]) * values[b, idx[m]] + w[m] * values[b, idx[m]+1].
    idx/w are fixed sample positions, not differentiated.
    """
    if values.ndim != 3:
        raise ShapeMismatch(f"interp: values must be [batch, grid, dim], got {values.shape}")
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    return _record_op("interp", (values,), (idx, w, int(n_grid)))


def rowmatvec(kmat, vec):
    """Per-row matrix-vector contraction, batched over the vector's lead axis.

    kmat [M, d, d] applied to vec [B, M, d]: out[b, m] = kmat[m] @ vec[b, m].
    """
    sk, sv = kmat.shape, vec.shape
    if len(sk) != 3 or sk[1] != sk[2]:
        raise ShapeMismatch(f"rowmatvec: kmat must be [M, d, d], got {sk}")
    if len(sv) != 3 or sv[1] != sk[0] or sv[2] != sk[1]:
        raise ShapeMismatch(f"rowmatvec: vec shape {sv} does not match kmat {sk}")
    return _record_op("rowmatvec", (kmat, vec))


def grad_check(fn, params, eps=1e-5):
    """Max relative error between recorded gradients and central differences.

    fn() must rebuild the same scalar loss from `params` (a dict or iterable
    of DTensors) on every call, eagerly or under a Record.
    """
    if eps <= 0:
        raise EngineError("grad_check: eps must be positive")
    plist = list(params.values()) if isinstance(params, dict) else list(params)

    with Record() as rec:
        for p in plist:
            rec.watch(p)
        loss = fn()
    grads = rec.backward(loss)
    analytic = [rec.grad(grads, p).data.copy() for p in plist]

    worst = 0.0
    for p, ga in zip(plist, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn().data.item()
            flat[i] = orig - eps
            lo = fn().data.item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            if not np.isfinite(fd) or not np.isfinite(gflat[i]):
                raise EngineError("grad_check: non-finite value encountered")
            worst = max(worst, abs(gflat[i] - fd) / (abs(fd) + 1e-12))
    return worst
