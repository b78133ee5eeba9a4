"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that receives at least one input with ``requires_grad`` records a
node holding its parents and a vector-Jacobian product. Node ids come from a
global counter, so creation order is a valid topological order; a ``Tape``
collects the nodes reachable from a scalar output and replays them in reverse.

Conventions:
    * relu'(0) = 0
    * clip passes gradient only strictly inside (lo, hi)
    * conv2d is stride 1, valid padding
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are not conformable for an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_needs", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._needs: tuple[bool, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    needs = tuple(p.requires_grad for p in parents)
    if any(needs):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._needs = needs
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(np.mean(a.data, axis=axis), (a,), vjp, "mean")


# ---------------------------------------------------------------- structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        if bd.ndim == 1:
            return (np.outer(g, bd) if na else None), (ad.T @ g if nb else None)
        return (g @ bd.T if na else None), (ad.T @ g if nb else None)

    return _node(ad @ bd, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- softmax family


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    s = _softmax(a.data)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax(a) -> Tensor:
    """Numerically stable log(softmax(a)) over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- convolution


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 valid cross-correlation. x: (N, C, H, W), w: (F, C, kh, kw), b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} are not conformable")
    kh, kw = w.shape[2:]
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    xd, wd = x.data, w.data
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))  # (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    hout, wout = out.shape[2:]
    nx, nw = x.requires_grad, w.requires_grad

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if nw else None
        if not nx:
            return None, gw
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + hout, j : j + wout] += np.tensordot(
                    g, wd[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        return gx, gw

    out_t = _node(np.ascontiguousarray(out), (x, w), vjp, "conv2d")
    if b is None:
        return out_t
    return add(out_t, reshape(as_tensor(b), (1, -1, 1, 1)))


# ---------------------------------------------------------------- tape


class Tape:
    """Nodes reachable from ``output`` in creation (topological) order."""

    def __init__(self, output: Tensor):
        self.output = output
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(p for p, need in zip(node._parents, node._needs) if need)
        self.nodes: list[Tensor] = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self) -> dict[int, np.ndarray]:
        """Run the reverse sweep; returns gradient buffers keyed by node id."""
        out = self.output
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {out._id: np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None) if not node.is_leaf else grads.get(node._id)
            if g is None or node.is_leaf:
                continue
            for parent, need, pg in zip(node._parents, node._needs, node._vjp(g)):
                if pg is None or not need:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Existing ``.grad`` buffers are overwritten, not accumulated.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads = tape.backward()
    for leaf in tape.leaves:
        leaf.grad = grads.get(leaf._id, np.zeros_like(leaf.data))
    return grads


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt``; zeros where no path exists."""
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    grads = Tape(loss).backward() if loss.requires_grad else {}
    return [grads.get(t._id, np.zeros_like(t.data)) for t in wrt]
