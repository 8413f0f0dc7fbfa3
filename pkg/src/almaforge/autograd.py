"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a row-major numpy array (float32 by default, float64 for gradient
checks).  Operations record themselves on the active :class:`Tape` only when
one of their inputs requires a gradient, so inference code pays nothing for
the machinery.

    with Tape() as tape:
        loss = some_function_of(params)
    tape.backward(loss)
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, dtype={self.dtype})"

    # sugar used by model code
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Backward walks the record in exact reverse order and may run once.  A tape
    is single-owner; do not share one between threads.
    """

    def __init__(self):
        self.nodes = []
        self._consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def record(self, out, inputs, backward_fn):
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss, grad=None):
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        self._consumed = True
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward() needs an explicit grad for non-scalar shape {list(loss.shape)}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            in_grads = fn(g)
            taken = []
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    # a fresh array can be adopted; views and shared arrays must be copied
                    owned = gi.base is None and gi is not g and not any(gi is x for x in taken)
                    if gi.dtype != t.dtype or not owned:
                        gi = gi.astype(t.dtype, copy=True)
                    t.grad = gi
                    taken.append(gi)
                else:
                    t.grad += gi
            # outputs of recorded ops are intermediates; leaves never appear here
            out.grad = None
        self.nodes = []


def active_tape():
    return getattr(_state, "tape", None)


class no_grad:
    """Context manager that suspends recording (used by decoding/validation)."""

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def _wrap(data, inputs, backward_fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """a[..., m, k] @ b[k, n] (shared weight) or batched a[..., m, k] @ b[..., k, n]."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {list(a.shape)} x {list(b.shape)}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {list(a.shape)} x {list(b.shape)}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _wrap(out, (a, b), backward)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {list(a.shape)} + {list(b.shape)}")
    return _wrap(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x, bias):
    """x[..., n] + bias[n]; the only broadcasting the engine supports."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias shape {list(bias.shape)} does not match {list(x.shape)}")

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _wrap(x.data + bias.data, (x, bias), backward)


def scale(x, c):
    c = float(c)
    return _wrap(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {list(a.shape)} * {list(b.shape)}")
    A, B = a.data, b.data
    return _wrap(A * B, (a, b), lambda g: (g * B, g * A))


def sum_all(x):
    return _wrap(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def reshape(x, shape):
    old = x.shape
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes):
    inv = np.argsort(axes)
    return _wrap(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(x):
    """Swap the last two axes."""
    return _wrap(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),))


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding of {table.shape[0]} rows")
    rows = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _wrap(rows, (table,), backward)


def slice_rows(x, n):
    """First ``n`` rows of a 2-D tensor (positional-embedding prefix)."""
    full = x.shape

    def backward(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[:n] = g
        return (gx,)

    return _wrap(x.data[:n], (x,), backward)


def gelu(x):
    """tanh-approximated GELU."""
    X = x.data
    k = X.dtype.type(np.sqrt(2.0 / np.pi))
    c = X.dtype.type(0.044715)
    # in-place chains: this op runs on the widest activations in the model
    X2 = X * X
    inner = X2 * c
    inner += 1
    inner *= X
    inner *= k
    t = np.tanh(inner, out=inner)
    out = t + 1
    out *= X
    out *= X.dtype.type(0.5)

    def backward(g):
        d = X2 * (3.0 * c)
        d += 1
        d *= k
        d *= 1 - t * t
        d *= X
        d += 1 + t
        d *= X.dtype.type(0.5)
        d *= g
        return (d,)

    return _wrap(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = X.shape[-1]

    def backward(g):
        gg = g.reshape(-1, n)
        xh = xhat.reshape(-1, n)
        ggain = (gg * xh).sum(axis=0)
        gbias = gg.sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, ggain, gbias

    return _wrap(out, (x, gain, bias), backward)


def _softmax_last(X):
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction."""
    y = _softmax_last(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _wrap(y, (x,), backward)


def masked_softmax(x, allowed):
    """Softmax over the last axis where ``allowed`` is False means -inf.

    ``allowed`` is a boolean array broadcastable to ``x``.  Every row needs at
    least one allowed entry (attention diagonals guarantee it).
    """
    X = np.where(allowed, x.data, -np.inf)
    y = _softmax_last(X).astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _wrap(y, (x,), backward)


def log_softmax_np(X):
    m = X.max(axis=-1, keepdims=True)
    s = X - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def masked_cross_entropy(logits, targets, mask):
    """Summed next-token NLL over positions with mask 1.

    ``logits`` is [T, V] (or [..., V], flattened); returns ``(loss_sum, count)``
    where ``loss_sum`` is a scalar Tensor and ``count`` the number of
    supervised positions.  The per-token loss is ``loss_sum / count``.
    """
    V = logits.shape[-1]
    L = logits.data.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask).reshape(-1)
    if targets.shape[0] != L.shape[0] or mask.shape[0] != L.shape[0]:
        raise ShapeError(f"targets/mask length {targets.shape[0]}/{mask.shape[0]} vs {L.shape[0]} positions")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("no supervised positions: loss mask is all zero")
    sel = np.flatnonzero(mask)
    tsel = targets[sel]
    if tsel.size and (tsel.min() < 0 or tsel.max() >= V):
        raise IndexError("target id out of range")
    Ls = L[sel]
    lp = log_softmax_np(Ls)
    nll = -lp[np.arange(sel.size), tsel]
    total = np.asarray(nll.sum(dtype=np.float64), dtype=logits.dtype)

    def backward(g):
        p = np.exp(lp)
        p[np.arange(sel.size), tsel] -= 1.0
        full = np.zeros_like(L)
        full[sel] = p * g
        return (full.reshape(logits.shape),)

    return _wrap(total, (logits,), backward), count
