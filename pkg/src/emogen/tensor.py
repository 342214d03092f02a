"""A small dense tensor type with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Each op records its parents and a closure that
maps the output gradient to parent gradients; ``Tensor.backward`` walks the
recorded graph once in reverse topological order.

Float32 is the default dtype. ``precision(np.float64)`` switches newly
created tensors to float64, which the gradient checks use.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class ShapeError(ValueError):
    pass


def _shape_error(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ ops


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        raise _shape_error("add", a.shape, b.shape)
    bias = a.shape != b.shape

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _result(a.data + b.data, (a, b), backward, "add")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise _shape_error("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        idx = [slice(None)] * g.ndim
        res = []
        for i in range(len(ts)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return _result(out, ts, backward, "concat")


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise _shape_error("split", x.shape, tuple(sizes))
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(bounds[i], bounds[i + 1])
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        outs.append(_result(x.data[idx], (x,), backward, "split"))
    return outs


def take(table, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``table`` along ``axis``; gradients scatter-add back."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % table.ndim
    n = table.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    out = np.take(table.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        g_moved = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        g_flat = g_moved.reshape((idx.size,) + moved.shape[1:])
        np.add.at(moved, idx.reshape(-1), g_flat)
        return (full,)

    return _result(out, (table,), backward, "take")


def embedding(table, ids) -> Tensor:
    return take(table, ids, axis=0)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", x.shape, shape) from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def causal_softmax(x) -> Tensor:
    """Softmax over the last axis with keys after the query position masked out."""
    x = as_tensor(x)
    L = x.shape[-1]
    if x.ndim < 2 or x.shape[-2] != L:
        raise _shape_error("causal_softmax", x.shape)
    flat = np.ascontiguousarray(x.data).reshape(-1, L, L)
    y = kernels.causal_softmax_forward(flat, np.empty_like(flat)).reshape(x.shape)

    def backward(g):
        gf = np.ascontiguousarray(g, dtype=y.dtype).reshape(-1, L, L)
        out = kernels.causal_softmax_backward(y.reshape(-1, L, L), gf, np.empty_like(gf))
        return (out.reshape(x.shape),)

    return _result(y, (x,), backward, "causal_softmax")


def relative_causal_softmax(scores, rel, scale: float, p: float = 0.0,
                            rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Fused ``dropout(causal_softmax((scores + skew(rel)) * scale))``.

    Equivalent to composing ``skew``, ``add``, ``scale``, ``causal_softmax``
    and ``dropout`` (up to the dropout mask stream) without the intermediates.
    """
    scores, rel = as_tensor(scores), as_tensor(rel)
    if scores.shape != rel.shape or scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise _shape_error("relative_causal_softmax", scores.shape, rel.shape)
    shape = scores.shape
    L = shape[-1]
    drop = training and p > 0
    if drop and rng is None:
        raise ValueError("dropout needs a seeded generator in training mode")
    s = np.ascontiguousarray(scores.data).reshape(-1, L, L)
    r = np.ascontiguousarray(rel.data, dtype=s.dtype).reshape(-1, L, L)
    y = np.empty_like(s)
    d = np.empty_like(s) if drop else y
    seed = int(rng.integers(0, 2**63)) if drop else 0
    p_eff = float(p) if drop else 0.0
    kernels.rel_causal_softmax_forward(s, r, float(scale), y, d, p_eff, seed)
    out = (d if drop else y).reshape(shape)

    def backward(g):
        gf = np.ascontiguousarray(g, dtype=y.dtype).reshape(-1, L, L)
        gs, gr = kernels.rel_causal_softmax_backward(y, gf, float(scale), np.empty_like(y),
                                                     np.empty_like(y), d, p_eff)
        return gs.reshape(shape), gr.reshape(shape)

    return _result(out, (scores, rel), backward, "relative_causal_softmax")


def masked_fill(x, mask, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, x.dtype.type(value), x.data)
    except ValueError:
        raise _shape_error("masked_fill", x.shape, mask.shape) from None

    def backward(g):
        return (_unbroadcast(np.where(mask, 0, g), x.shape),)

    return _result(out, (x,), backward, "masked_fill")


def skew(x) -> Tensor:
    """Shift row ``i`` of an (L, L) query-by-reversed-distance matrix into key order.

    Input column ``m`` holds distance ``L - 1 - m``; output ``[i, j]`` holds
    distance ``i - j`` for ``j <= i``. Entries above the diagonal are junk and
    must be masked by the caller. Implemented as pad / reshape / slice.
    """
    x = as_tensor(x)
    L = x.shape[-1]
    if x.ndim < 2 or x.shape[-2] != L:
        raise _shape_error("skew", x.shape)
    lead = x.shape[:-2]
    padded = np.zeros(lead + (L, L + 1), dtype=x.dtype)
    padded[..., 1:] = x.data
    out = padded.reshape(lead + (L + 1, L))[..., 1:, :]

    def backward(g):
        full = np.zeros(lead + (L + 1, L), dtype=g.dtype)
        full[..., 1:, :] = g
        return (full.reshape(lead + (L, L + 1))[..., 1:],)

    return _result(out, (x,), backward, "skew")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise _shape_error("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, D)
        gg = (g2 * xhat.reshape(-1, D)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gbeta

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    if rng is None:
        raise ValueError("dropout needs a seeded generator in training mode")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits, targets, ignore_index: int = -100, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis.

    Positions whose target equals ``ignore_index`` add nothing to the loss or
    its gradient; ``mean`` divides by the number of remaining positions.
    """
    logits = as_tensor(logits)
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, V)
    if t.shape[0] != z.shape[0]:
        raise _shape_error("cross_entropy", logits.shape, np.shape(targets))
    valid = t != ignore_index
    safe_t = np.where(valid, t, 0)
    if np.any(safe_t < 0) or np.any(safe_t >= V):
        raise IndexError("cross_entropy: target outside vocabulary")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    nll = lse - z[np.arange(len(t)), safe_t]
    n = int(valid.sum())
    total = float((nll * valid).sum())
    denom = max(n, 1) if reduction == "mean" else 1
    loss = np.asarray(total / denom, dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(t)), safe_t] -= 1.0
        p *= valid[:, None]
        p *= g / denom
        return (p.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _result(loss, (logits,), backward, "cross_entropy")


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise _shape_error("mse", pred.shape, target.shape)
    diff = pred.data - target
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    return _result(loss, (pred,), lambda g: (g * 2.0 * diff / diff.size,), "mse")


def masked_mean(x, mask) -> Tensor:
    """Mean over axis 1 of (B, L, D) restricted to positions where ``mask`` is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:2]:
        raise _shape_error("masked_mean", x.shape, m.shape)
    counts = np.maximum(m.sum(axis=1, keepdims=True), 1)
    w = m / counts
    out = np.einsum("bl,bld->bd", w, x.data)
    return _result(out, (x,), lambda g: (w[:, :, None] * g[:, None, :],), "masked_mean")


def total(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
