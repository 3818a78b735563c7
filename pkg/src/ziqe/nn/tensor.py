"""A small reverse-mode automatic differentiation engine on numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure propagating the output gradient back to them.  ``backward`` walks
the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e9  # stands in for -inf in additive attention masks


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_owns_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owns_grad = False

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self._owns_grad:
            self.grad += g
        elif self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accum(np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not node._owns_grad:
                    node.grad = None  # intermediate buffers are not kept

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accum(-g))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: a._accum(-g * out * out))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: a._accum(2.0 * g * a.data))


def sigmoid(a: Tensor) -> Tensor:
    out = stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: a._accum(g * mask))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` without overflow."""
    out = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: a._accum(g * stable_sigmoid(a.data)))


def stop_gradient(a: Tensor) -> Tensor:
    """Same value, no gradient flows through."""
    return Tensor(a.data)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- shape / reduction ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim >= 2:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                gb = np.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accum(full)

    return _make(table.data[ids], (table,), backward)


# -- fused numerics --------------------------------------------------------------
def lstm_scan(xw: Tensor, wh: Tensor, valid: np.ndarray, reverse: bool = False) -> Tensor:
    """Run one LSTM direction and return its final hidden state.

    Parameters
    ----------
    xw : Tensor
        ``(batch, seq, 4 * hidden)`` input projections, gate order i, f, g, o.
    wh : Tensor
        ``(hidden, 4 * hidden)`` recurrent weights.
    valid : ndarray
        ``(batch, seq)`` boolean; invalid steps carry the state through unchanged.
    reverse : bool
        Scan from the last step to the first.
    """
    batch, seq, four_h = xw.shape
    hid = four_h // 4
    dtype = xw.dtype
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh call covers all four gates
    scale = np.repeat(np.array([0.5, 0.5, 1.0, 0.5], dtype=dtype), hid)
    dscale = np.repeat(np.array([0.25, 0.25, 1.0, 0.25], dtype=dtype), hid)
    steps = range(seq - 1, -1, -1) if reverse else range(seq)
    masks = valid.astype(dtype)
    h = np.zeros((batch, hid), dtype=dtype)
    c = np.zeros_like(h)
    tape = []
    for t in steps:
        th = np.tanh((xw.data[:, t, :] + h @ wh.data) * scale)
        i, f, o = [0.5 * (1.0 + th[:, k * hid:(k + 1) * hid]) for k in (0, 1, 3)]
        g = th[:, 2 * hid:3 * hid]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        m = masks[:, t:t + 1]
        tape.append((t, h, c, i, f, g, o, tc, m, (1.0 - th * th) * dscale))
        h = h + m * (o * tc - h)
        c = c + m * (c_new - c)

    def backward(gh):
        gh = gh.astype(dtype, copy=False)
        dxw = np.zeros_like(xw.data)
        dwh = np.zeros_like(wh.data)
        wh_t = wh.data.T
        gc = np.zeros_like(gh)
        for t, h_prev, c_prev, i, f, g, o, tc, m, deriv in reversed(tape):
            gh_new = m * gh
            gc_new = m * gc + gh_new * o * (1.0 - tc * tc)
            dz = np.concatenate([gc_new * g, gc_new * c_prev, gc_new * i, gh_new * tc], axis=1)
            dz *= deriv
            dxw[:, t, :] = dz
            dwh += h_prev.T @ dz
            gh = gh - m * gh + dz @ wh_t
            gc = gc - m * gc + gc_new * f
        if xw.requires_grad:
            xw._accum(dxw)
        if wh.requires_grad:
            wh._accum(dwh)

    return _make(h, (xw, wh), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        a._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            x._accum(
                inv
                / n
                * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            )

    return _make(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets``.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    ``weights`` (same shape as targets) selects and scales positions; the
    result is ``sum(w * nll) / sum(w)``.
    """
    targets = np.asarray(targets)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=flat.dtype) if weights is None else np.asarray(weights, dtype=flat.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted target")
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    value = np.asarray((w * nll).sum() / total, dtype=flat.dtype)

    def backward(g):
        p = e / s
        p[rows, t] -= 1.0
        p *= (w / total)[:, None] * g
        logits._accum(p.reshape(logits.shape))

    return _make(value, (logits,), backward)
