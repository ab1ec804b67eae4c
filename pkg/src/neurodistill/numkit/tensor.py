"""Dense tensors with taped reverse-mode differentiation.

Values are numpy arrays (float32 by default, float64 under the
``precision`` context for gradient checking). Operations executed while a
Tape is active append backward closures to it; ``backward`` replays the
tape in reverse, which visits every node exactly once in reverse
topological order because the tape records ops in execution order.
Without an active tape the same functions are plain numpy computations,
which is how frozen teacher forwards stay cheap.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_DTYPE_STACK = [np.float32]
_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def default_dtype():
    return _DTYPE_STACK[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. np.float64)."""
    _DTYPE_STACK.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


class Tape:
    """Ordered record of executed ops and the leaves they touched."""

    __slots__ = ("_nodes", "_leaves")

    def __init__(self):
        self._nodes = []
        self._leaves = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)


def _tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Run a block without recording, even if a tape is active."""
    _TAPE_STACK.append(None)
    # a None entry makes _tape() falsy while preserving nesting
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """Shaped float data plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=default_dtype())
        if arr.ndim > 0 and min(arr.shape, default=1) <= 0:
            raise ValueError(f"tensor dims must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; full implementations live below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensor(data):
    """Wrap data as a non-trainable tensor (constant leaf)."""
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data, name):
    """Named trainable leaf; gradients are collected under this name."""
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _record(out, inputs, bwd):
    """Append a backward closure if a tape is live and any input is tracked."""
    tape = _tape()
    if tape is None:
        return out
    tracked = False
    for x in inputs:
        if isinstance(x, Tensor) and x._tracked:
            tracked = True
            if x.requires_grad:
                tape._leaves.append(x)
    if tracked:
        out._tracked = True
        tape._nodes.append((out, bwd))
    return out


def _acc(t, g):
    """Accumulate gradient g into tensor t."""
    if not t._tracked:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def backward(loss):
    """Reverse-replay the tape of a scalar loss.

    Returns a dict mapping parameter names to gradient arrays for every
    named parameter the loss depends on. Unnamed tracked leaves still get
    their .grad field populated.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ValueError("backward expects a scalar tensor loss")
    tape = _tape()
    if tape is None or not loss._tracked:
        raise ValueError("loss was not recorded on an active tape")
    for out, _ in tape._nodes:
        out.grad = None
    for leaf in tape._leaves:
        leaf.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, bwd in reversed(tape._nodes):
        if out.grad is not None:
            bwd(out.grad)
            out.grad = None  # free intermediate grads eagerly
    grads = {}
    for leaf in tape._leaves:
        if leaf.name is not None and leaf.grad is not None:
            grads[leaf.name] = leaf.grad
    return grads


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, -_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar (cheaper than mul with a constant)."""
    a = tensor(a)
    out = Tensor(a.data * s)

    def bwd(g):
        _acc(a, g * s)

    return _record(out, (a,), bwd)


def div(a, b):
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def exp(a):
    a = tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        _acc(a, g * out.data)

    return _record(out, (a,), bwd)


def log(a):
    a = tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        _acc(a, g / a.data)

    return _record(out, (a,), bwd)


def sqrt(a):
    a = tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        _acc(a, g * (0.5 / out.data))

    return _record(out, (a,), bwd)


def tanh(a):
    a = tensor(a)
    out = Tensor(np.tanh(a.data))

    def bwd(g):
        _acc(a, g * (1.0 - out.data * out.data))

    return _record(out, (a,), bwd)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _acc(a, g * (cdf + x * pdf))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = tensor(a), tensor(b)
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bwd)


def linear(x, w, b=None):
    """x @ w (+ b); fused so the bias reduction happens once."""
    x, w = tensor(x), tensor(w)
    y = np.matmul(x.data, w.data)
    if b is not None:
        b = tensor(b)
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        _acc(x, np.matmul(g, w.data.T))
        gw = np.matmul(x.data.reshape(-1, x.data.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        _acc(w, gw)
        if b is not None:
            _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(b.data.shape))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def reshape(a, shape):
    a = tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def transpose(a, axes):
    a = tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        _acc(a, np.transpose(g, inv))

    return _record(out, (a,), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        _acc(a, ga)

    return _record(out, (a,), bwd)


def concat(parts, axis):
    parts = [tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _acc(p, g[tuple(idx)])
            offset += s

    return _record(out, tuple(parts), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    a = tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    a = tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    denom = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g / denom, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / denom, a.data.shape).copy())

    return _record(out, (a,), bwd)


def softmax(a):
    """Softmax over the last axis; backward only needs the output."""
    a = tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _acc(a, p * (g - dot))

    return _record(out, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    d = x.data.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (gg - m1 - xhat * m2))
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        _acc(gamma, (flat_g * flat_xhat).sum(axis=0))
        _acc(beta, flat_g.sum(axis=0))

    return _record(out, (x, gamma, beta), bwd)


def embedding(table, idx):
    """Row lookup: table [V, E], idx int array of any shape -> idx.shape + (E,)."""
    table = tensor(table)
    idx = np.asarray(idx)
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.data.shape[-1]))
        _acc(table, gt)

    return _record(out, (table,), bwd)


def gather_rows(x, idx):
    """Batched row select: x [B, N, D], idx [B, K] -> [B, K, D]."""
    x = tensor(x)
    idx = np.asarray(idx)
    b_ix = np.arange(x.data.shape[0])[:, None]
    out = Tensor(x.data[b_ix, idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b_ix, idx), g)
        _acc(x, gx)

    return _record(out, (x,), bwd)


def causal_conv1d(x, w, b, dilation=1):
    """Left-padded dilated conv along time: x [B, T, Cin], w [K, Cin, Cout].

    y[t] = b + sum_j x[t - j*dilation] @ w[j]; positions before the start
    read zeros, so output at time t never sees input after t.
    """
    x, w, b = tensor(x), tensor(w), tensor(b)
    B, T, cin = x.data.shape
    K = w.data.shape[0]
    y = np.matmul(x.data, w.data[0]) + b.data
    for j in range(1, K):
        shift = j * dilation
        if shift >= T:
            break
        y[:, shift:, :] += np.matmul(x.data[:, : T - shift, :], w.data[j])
    out = Tensor(y)

    def bwd(g):
        gx = np.matmul(g, w.data[0].T)
        gw = np.zeros_like(w.data)
        gw[0] = np.matmul(x.data.reshape(-1, cin).T, g.reshape(-1, g.shape[-1]))
        for j in range(1, K):
            shift = j * dilation
            if shift >= T:
                break
            gx[:, : T - shift, :] += np.matmul(g[:, shift:, :], w.data[j].T)
            gw[j] = np.matmul(
                x.data[:, : T - shift, :].reshape(-1, cin).T,
                g[:, shift:, :].reshape(-1, g.shape[-1]),
            )
        _acc(x, gx)
        _acc(w, gw)
        _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(out, (x, w, b), bwd)
