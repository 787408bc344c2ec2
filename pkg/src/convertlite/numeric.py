"""Differentiable numpy primitives with a small reverse-mode tape.

Every op returns a :class:`Tensor`; calling :meth:`Tensor.backward` on a scalar
walks the recorded graph once in reverse topological order.

Precision policy
----------------
Under ``precision("mixed")`` ordinary ops (matmul, add, gelu, ...) round their
outputs and their input-gradients to IEEE binary16, emulating FP16 compute.
Layer norm, L2 normalisation, softmax and the loss always compute in float32
and hand back float32 results.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np

DTYPE = np.float32

LN_EPS = 1e-6
L2_EPS = 1e-12

_MIXED = contextvars.ContextVar("convertlite_mixed", default=False)


@contextlib.contextmanager
def precision(mode: str):
    """Select ``"fp32"`` or ``"mixed"`` for ops created inside the block."""
    if mode not in ("fp32", "mixed"):
        raise ValueError(f"unknown precision mode {mode!r}")
    token = _MIXED.set(mode == "mixed")
    try:
        yield
    finally:
        _MIXED.reset(token)


def mixed_enabled() -> bool:
    return _MIXED.get()


def _to_half_numpy(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

if numba is not None:

    @numba.njit(cache=True)
    def _half_kernel(x, out):
        # binary16 round-half-even on float32 bits: normals keep 10 mantissa
        # bits, |x| < 2**-14 snaps to multiples of 2**-24, |x| >= 65520 -> inf
        u = out.view(np.uint32)
        xu = x.view(np.uint32)
        for i in range(x.size):
            v = x[i]
            a = abs(v)
            if not (a < np.float32(65520.0)):
                if v != v:
                    out[i] = v
                elif v > 0:
                    out[i] = np.inf
                else:
                    out[i] = -np.inf
            elif a < np.float32(6.103515625e-05):
                out[i] = np.float32(np.rint(v * np.float32(16777216.0))) * np.float32(
                    5.960464477539063e-08)
            else:
                b = xu[i]
                u[i] = (b + np.uint32(0x0FFF) + ((b >> np.uint32(13)) & np.uint32(1))) \
                    & np.uint32(0xFFFFE000)
        return out


def to_half(x: np.ndarray) -> np.ndarray:
    """Round to binary16 (round-half-even) and widen back to float32."""
    if numba is None:
        return _to_half_numpy(x)
    x = np.ascontiguousarray(x, dtype=np.float32)
    out = np.empty_like(x)
    _half_kernel(x.reshape(-1), out.reshape(-1))
    return out


def _rounder():
    return to_half if _MIXED.get() else (lambda a: a)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Back-propagate from this tensor; ``seed`` defaults to ones (scalars: 1)."""
        if seed is None:
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are no longer needed once pushed to parents
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward):
    parents = tuple(p for p in parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rnd = _rounder()

    def bw(g):
        g = rnd(g)
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(rnd(a.data + b.data), (a, b), bw)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rnd = _rounder()

    def bw(g):
        if a.requires_grad:
            a._accumulate(rnd(_unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            b._accumulate(rnd(_unbroadcast(g * a.data, b.shape)))

    return _make(rnd(a.data * b.data), (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    rnd = _rounder()
    c = float(c)

    def bw(g):
        a._accumulate(rnd(g * c))

    return _make(rnd(a.data * np.asarray(c, a.data.dtype)), (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rnd = _rounder()

    def bw(g):
        if a.requires_grad:
            a._accumulate(rnd(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(rnd(_unbroadcast(gb, b.shape)))

    return _make(rnd(a.data @ b.data), (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    if x.ndim != 2:
        out = reshape(out, lead + (w.shape[-1],))
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(a.data[key], (a,), bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather; ids outside the table are a hard error."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range for embedding table of {table.shape[0]} rows"
        )

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _make(table.data[ids], (table,), bw)


def _gelu_np(x):
    return x / (1.0 + np.exp(-1.702 * x))


def gelu_fast(x) -> Tensor:
    """x * sigmoid(1.702 x)."""
    x = as_tensor(x)
    rnd = _rounder()
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-1.702 * x.data))
    s = s.astype(x.data.dtype)

    def bw(g):
        x._accumulate(rnd(g * (s + 1.702 * x.data * s * (1.0 - s))))

    return _make(rnd(x.data * s), (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0

    def bw(g):
        x._accumulate(g * on)

    return _make(x.data * on, (x,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def bw(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), bw)


def layer_norm(x, gain, bias) -> Tensor:
    """Normalise the last axis (population variance, eps 1e-6) then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    out_dtype = np.result_type(x.data.dtype, np.float32)
    xs = x.data.astype(out_dtype)
    mu = xs.mean(axis=-1, keepdims=True)
    xc = xs - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    gd = gain.data.astype(out_dtype)
    n = xs.shape[-1]

    def bw(g):
        g = g.astype(out_dtype)
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gd
            gx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                            - xhat * (gx * xhat).sum(-1, keepdims=True))
            x._accumulate(gx)

    return _make(xhat * gd + bias.data.astype(out_dtype), (x, gain, bias), bw)


def l2_normalize(x, axis=-1) -> Tensor:
    """x / sqrt(sum(x^2) + 1e-12); the zero vector maps to zero."""
    x = as_tensor(x)
    out_dtype = np.result_type(x.data.dtype, np.float32)
    xs = x.data.astype(out_dtype)
    norm = np.sqrt((xs * xs).sum(axis=axis, keepdims=True) + L2_EPS)
    y = xs / norm

    def bw(g):
        g = g.astype(out_dtype)
        x._accumulate((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _make(y, (x,), bw)


def softmax_np(scores: np.ndarray, allowed: np.ndarray | None = None, axis=-1) -> np.ndarray:
    """Softmax restricted to ``allowed`` positions; excluded entries are exactly 0.

    Rows with no allowed entry come back all-zero; callers guarantee at
    least one survivor (attention keeps the diagonal).
    """
    s = np.asarray(scores)
    s = s.astype(np.result_type(s.dtype, np.float32))
    if allowed is None:
        m = s.max(axis=axis, keepdims=True)
        e = np.exp(s - m)
    else:
        masked = np.where(allowed, s, -np.inf)
        m = masked.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(allowed, np.exp(np.where(allowed, s, m) - m), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def softmax_masked(scores, allowed: np.ndarray | None = None, axis=-1) -> Tensor:
    scores = as_tensor(scores)
    p = softmax_np(scores.data, allowed, axis=axis)

    def bw(g):
        g = g.astype(p.dtype)
        scores._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (scores,), bw)


def log_softmax_np(logits: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(logits)
    x = x.astype(np.result_type(x.dtype, np.float32))
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def soft_cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Sum over rows of ``-sum_j t_ij log softmax_j(logits_i)``; float32 or wider."""
    logits = as_tensor(logits)
    logp = log_softmax_np(logits.data)
    t = np.asarray(targets, dtype=logp.dtype)
    loss = -(t * logp).sum()

    def bw(g):
        p = np.exp(logp)
        logits._accumulate(g * (p * t.sum(-1, keepdims=True) - t))

    return _make(np.asarray(loss), (logits,), bw)


def orthogonal_init(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """(Semi-)orthogonal matrix via QR of a Gaussian draw, sign-corrected."""
    m, n = shape
    if m < 1 or n < 1:
        raise ValueError("orthogonal_init needs positive dimensions")
    a = rng.standard_normal((max(m, n), min(m, n)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if m < n:
        q = q.T
    return (gain * q).astype(DTYPE)
