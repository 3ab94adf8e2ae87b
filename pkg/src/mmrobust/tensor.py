"""Dense float64 tensors with a define-by-run reverse-mode tape.

Ops record onto the innermost active :class:`Tape` whenever one of their
inputs requires a gradient. Outside a ``with Tape():`` block nothing is
recorded, which is how evaluation runs.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x]
    array([2., 4., 6.])

After ``backward`` the tape is consumed: its nodes are dropped and a second
``backward`` raises :class:`TapeError`. Re-run the forward pass under a fresh
tape instead.
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, FullyMaskedRowError, TapeError

DEBUG = os.environ.get("MMROBUST_DEBUG", "") not in ("", "0")

_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node_id is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only op log. Node ids are creation indices, so the log is a DAG
    in topological order and the reverse sweep visits each node once."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def op_kinds(self):
        return [n.op for n in self.nodes]

    def _append(self, op, inputs, out, vjp):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); open a new Tape")
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(op, inputs, vjp))

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar ``loss``.

        Returns ``{leaf_tensor: gradient}`` for every grad-enabled leaf the loss
        depends on; gradients from multiple paths are summed. Each leaf's
        ``.grad`` is set to the same array.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape; re-run the forward pass")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id is None:
                    prev = leaves.get(inp)
                    leaves[inp] = gi.copy() if prev is None else prev + gi
                else:
                    if inp.tape is not self:
                        raise TapeError("tensor from a different tape used as input")
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
        self.nodes = []
        self.consumed = True
        for leaf, g in leaves.items():
            leaf.grad = g
        return leaves


def backward(loss: Tensor) -> dict:
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss.tape is None:
        raise TapeError("loss is not attached to any tape")
    return loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out_data, vjp: Callable):
    out = Tensor(out_data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op}: non-finite output from finite inputs")
    if _active and any(t.requires_grad for t in inputs):
        _active[-1]._append(op, tuple(inputs), out, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1] if a.ndim else 1)
    out = kernels.gelu_fwd(x2).reshape(a.shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(x2.shape)
        return (kernels.gelu_bwd(x2, g2).reshape(a.shape),)

    return _emit("gelu", (a,), out, vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``np.matmul`` semantics for operands of rank >= 1, batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError("matmul", a.shape, b.shape)
    k_a = ad.shape[-1]
    k_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if k_a != k_b:
        raise DimensionError("matmul", a.shape, b.shape)
    if ad.ndim >= 2 and bd.ndim == 2:
        # fold leading dims into one GEMM (common case: activations @ weight)
        a2 = ad.reshape(-1, k_a)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, bd.shape[1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit("matmul", (a, b), out, vjp2)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def vjp(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        ga = _unbroadcast(ga, A.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, B.shape).reshape(bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", (a,), a.data.mean(axis=axis, keepdims=keepdims), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", old, shape) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def index(a, idx):
    """Basic or advanced indexing (row slicing, single positions)."""
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise DimensionError(f"index[{idx!r}]", shape) from exc

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
                for p in parts)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("index", (a,), np.array(out, copy=True), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", tuple(tensors), out, vjp)


def embedding(table, ids):
    """Gather rows ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding", table.shape, ids.shape)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range [0, {n}) "
                         f"(got min {ids.min()}, max {ids.max()})")

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.data[ids], vjp)


# ---------------------------------------------------------------- normalization

def masked_softmax(a, mask):
    """Softmax over the last axis restricted to ``mask`` (True = admissible).

    Masked entries come out exactly 0. A row with no admissible entry raises
    :class:`FullyMaskedRowError` rather than producing NaN.
    """
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("masked_softmax", a.shape)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise DimensionError("masked_softmax", a.shape, mask.shape) from None
    n = a.shape[-1]
    x2 = np.ascontiguousarray(a.data).reshape(-1, n)
    m2 = np.ascontiguousarray(mask).reshape(-1, n).view(np.uint8)
    p, bad = kernels.masked_softmax_fwd(x2, m2)
    if bad >= 0:
        raise FullyMaskedRowError(np.unravel_index(bad, a.shape[:-1]) if a.ndim > 1 else bad)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        return (kernels.masked_softmax_bwd(p, g2).reshape(a.shape),)

    return _emit("masked_softmax", (a,), p.reshape(a.shape), vjp)


def softmax(a):
    a = as_tensor(a)
    return masked_softmax(a, np.ones(a.shape[-1:], dtype=bool))


def log_softmax(a):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm", a.shape, gain.shape, bias.shape)
    x2 = np.ascontiguousarray(a.data).reshape(-1, n)
    y, xhat, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, float(eps))
    gd = gain.data

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        gx, gg, gb = kernels.layernorm_bwd(g2, xhat, rstd, gd)
        return gx.reshape(a.shape), gg, gb

    return _emit("layer_norm", (a, gain, bias), y.reshape(a.shape), vjp)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on ``sigmoid(logits)``, computed stably."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError("bce_with_logits", logits.shape, t.shape)
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("bce_with_logits", (logits,), out, lambda g: (g * (sig - t),))


def onehot_straight_through(soft):
    """Forward: exact one-hot at the first argmax. Backward: identity onto ``soft``.

    Computed as ``onehot + (soft - stop_grad(soft))`` so that the forward value
    is bit-exact one-hot (``soft - soft`` is exactly zero).
    """
    soft = as_tensor(soft)
    hard = np.zeros_like(soft.data)
    hard[int(np.argmax(soft.data))] = 1.0
    return add(Tensor(hard), sub(soft, soft.detach()))
