"""Dense tensors with a build-then-consume reverse-mode gradient tape.

Every differentiable op records a :class:`Node` carrying a global sequence
number.  ``backward`` gathers the nodes reachable from a scalar loss into a
:class:`GradTape`, replays their adjoints in strictly decreasing sequence
order (exact reverse execution order) and then marks them consumed, so a
second ``backward`` over the same graph raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_grad_enabled = True
_seq = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "out_id", "consumed")

    def __init__(self, op, parents, backward_fn, out_id):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.out_id = out_id
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    # -- introspection -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.node = Node(op, tuple(parents), backward_fn, id(t))
    return t


def custom_op(op: str, out: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Record a user-defined op; ``backward_fn(g)`` returns one adjoint per parent."""
    return _record(op, np.asarray(out), parents, backward_fn)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return a, b


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (unbroadcast(g / bd, ad.shape),
                              unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.maximum(a.data, 0), (a,),
                   lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on a raw array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = stable_sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul extents mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def contract(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Evaluate ``einsum(sa,sb->so)`` as one batched matmul (no private indices)."""
    batch = [c for c in so if c in sa and c in sb]
    free_a = [c for c in sa if c in so and c not in sb]
    free_b = [c for c in sb if c in so and c not in sa]
    summed = [c for c in sa if c in sb and c not in so]
    dims = {}
    for s_, arr in ((sa, a), (sb, b)):
        if len(s_) != arr.ndim:
            raise ShapeError(f"operand '{s_}' does not match shape {arr.shape}")
        for c, n in zip(s_, arr.shape):
            if dims.setdefault(c, n) != n:
                raise ShapeError(f"index '{c}' has extents {dims[c]} and {n}")

    def size(idx):
        return int(np.prod([dims[c] for c in idx], dtype=np.int64))

    a3 = a.transpose([sa.index(c) for c in batch + free_a + summed]).reshape(
        size(batch), size(free_a), size(summed))
    b3 = b.transpose([sb.index(c) for c in batch + summed + free_b]).reshape(
        size(batch), size(summed), size(free_b))
    order = batch + free_a + free_b
    out = np.matmul(a3, b3).reshape([dims[c] for c in order])
    out = out.transpose([order.index(c) for c in so])
    return np.ascontiguousarray(out).reshape(out.shape)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum whose operands have no repeated or private indices."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or not set(s) <= set(out_sub) | set(other):
            raise ValueError(f"unsupported einsum operand '{s}' in '{subscripts}'")
    if len(set(out_sub)) != len(out_sub) or not set(out_sub) <= set(sa) | set(sb):
        raise ValueError(f"unsupported einsum output '{out_sub}'")
    ad, bd = a.data, b.data
    out = contract(sa, sb, out_sub, ad, bd)

    def backward_fn(g):
        return (contract(out_sub, sb, sa, g, bd), contract(out_sub, sa, sb, g, ad))

    return _record("einsum", out, (a, b), backward_fn)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (b, c_in, h, w) input with (c_out, c_in, kh, kw) kernels."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d geometry mismatch: input {x.shape}, kernel {kernel.shape}")
    b, _, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    if stride < 1 or padding < 0 or kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"invalid conv2d geometry: kernel {kh}x{kw} on {h}x{w} "
                         f"with padding {padding}, stride {stride}")
    oh = kernels.out_size(h, kh, stride, padding)
    ow = kernels.out_size(w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = kernel.data.reshape(c_out, -1)
    out = cols @ w2.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2))
    x_shape, k_shape = x.shape, kernel.shape
    need_x = x.requires_grad

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dk = (g2.T @ cols).reshape(k_shape)
        dx = kernels.col2im(g2 @ w2, x_shape, kh, kw, stride, padding) if need_x else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record("conv2d", out, parents, backward_fn)


def pool2d(x, kind: str, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling over square windows without padding."""
    x = as_tensor(x)
    stride = stride or window
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if window < 1 or window > h or window > w or stride < 1:
        raise ShapeError(f"invalid pool2d geometry: window {window} on {h}x{w}")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    oh = kernels.out_size(h, window, stride, 0)
    ow = kernels.out_size(w, window, stride, 0)
    flat_shape = (b * c, 1, h, w)
    cols = kernels.im2col(x.data.reshape(flat_shape), window, window, stride, 0)
    area = window * window
    if kind == "max":
        # np.argmax returns the first maximal index in row-major window order.
        idx = np.argmax(cols, axis=1)
        out = cols[np.arange(cols.shape[0]), idx]

        def backward_fn(g):
            dcols = np.zeros_like(cols)
            dcols[np.arange(cols.shape[0]), idx] = g.reshape(-1)
            return (kernels.col2im(dcols, flat_shape, window, window, stride, 0).reshape(x.shape),)
    else:
        out = cols.mean(axis=1)

        def backward_fn(g):
            dcols = np.repeat(g.reshape(-1, 1) / area, area, axis=1).astype(g.dtype)
            return (kernels.col2im(dcols, flat_shape, window, window, stride, 0).reshape(x.shape),)

    return _record(f"{kind}pool2d", out.reshape(b, c, oh, ow), (x,), backward_fn)


# -- reductions and shape ops --------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if any(not -ndim <= a < ndim for a in axis):
        raise ShapeError(f"axes {axis} invalid for {ndim}-d tensor")
    return axes


def reduce(x, kind: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean``, ``l1_norm`` or ``l2_norm`` over ``axis`` (default: all)."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def expand(g):
        return np.expand_dims(g, axes) if not keepdims else g

    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(expand(g), xd.shape).copy(),)  # noqa: E731
    elif kind == "mean":
        out = xd.mean(axis=axes, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(expand(g) / count, xd.shape).astype(xd.dtype),)  # noqa: E731
    elif kind == "l1_norm":
        out = np.abs(xd).sum(axis=axes, keepdims=keepdims)
        fn = lambda g: (expand(g) * np.sign(xd),)  # noqa: E731
    elif kind == "l2_norm":
        norm = np.sqrt((xd * xd).sum(axis=axes, keepdims=True))
        out = norm if keepdims else norm.reshape(np.asarray(xd.sum(axis=axes)).shape)
        safe = np.where(norm > 0, norm, 1)

        def fn(g):
            return (expand(g) * np.where(norm > 0, xd / safe, 0),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _record(kind, np.asarray(out, dtype=xd.dtype), (x,), fn)


def l2_normalize(x, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """``x / ||x||_2`` along ``axis``; slices with norm below ``eps`` map to zero.

    Zeroing (rather than dividing by ``eps``) keeps every output norm in
    ``{0, 1}`` and makes the op idempotent.
    """
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, 1.0)
    y = np.where(big, xd / denom, 0.0).astype(xd.dtype, copy=False)

    def backward_fn(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, 0.0),)

    return _record("l2_normalize", y, (x,), backward_fn)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization of ``(b, c, h, w)`` over channel groups, then ``gamma x + beta``.

    Statistics come from each sample alone, so training and inference agree
    and outputs do not depend on batch composition.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma, x), as_tensor(beta, x)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects (b, c, h, w), got {x.shape}")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def backward_fn(g):
        gh = (g * gamma.data[:, None, None]).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True)
                    - xh * (gh * xh).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record("group_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _record("transpose", np.ascontiguousarray(out).reshape(out.shape), (x,),
                   lambda g: (g.transpose(inv),))


def take(x, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add adjoint."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    src_shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record("take", np.array(x.data[index]), (x,), backward_fn)


def bce_with_logits(z, y, weight=None) -> Tensor:
    """Elementwise ``-w [y log s(z) + (1-y) log(1-s(z))]`` in softplus form."""
    z = as_tensor(z)
    zd = z.data
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=zd.dtype)
    if y.shape != zd.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {zd.shape}")
    w = None if weight is None else np.asarray(weight, dtype=zd.dtype)
    out = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    if w is not None:
        out = w * out

    def backward_fn(g):
        d = stable_sigmoid(zd) - y
        return (g * d if w is None else g * w * d,)

    return _record("bce_with_logits", out, (z,), backward_fn)


# -- tape ----------------------------------------------------------------------

class GradTape:
    """Ordered record of the ops contributing to one loss."""

    def __init__(self, nodes: list[Node]):
        self.ops = sorted(nodes, key=lambda n: n.seq)
        self.visited: list[Node] = []
        self.consumed = False

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        nodes, seen, stack = [], set(), [out]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            if n.consumed:
                raise TapeError("tape already consumed; re-run the forward pass")
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.parents)
        return cls(nodes)

    def replay(self, out: Tensor):
        if self.consumed:
            raise TapeError("tape already consumed; re-run the forward pass")
        grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.ops):
            g = grads.pop(node.out_id, None)
            self.visited.append(node)
            fn, node.backward_fn, node.consumed = node.backward_fn, None, True
            if g is None:
                continue
            for parent, pg in zip(node.parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if parent.node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        self.consumed = True


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` of every leaf that requires grad; consumes the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return GradTape([])
        raise TapeError("loss is not on an active tape")
    if loss.node.consumed:
        raise TapeError("tape already consumed; re-run the forward pass")
    tape = GradTape.from_output(loss)
    tape.replay(loss)
    return tape
