"""Minimal reverse-mode differentiation on dense float64 numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them. The tape is rebuilt on every forward pass; calling
``backward`` on a scalar walks it in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor", "GraphError", "tensor", "constant", "no_grad", "is_grad_enabled",
    "matmul", "add", "sub", "mul", "neg", "scale", "relu", "leaky_relu",
    "hard_tanh", "tanh", "arctan", "sin", "cos", "tan", "exp", "concat",
    "reshape", "flatten", "take", "gather_rows", "segment_sum",
    "segment_softmax", "sum", "mean", "smooth_l1", "stack",
    "numeric_gradient", "gradient_check",
]

_GRAD_ENABLED = True


class GraphError(ValueError):
    """Raised on shape mismatches or misuse of the tape."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    # operator sugar
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

    def __getitem__(self, idx):
        return take(self, idx)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


_DETACHED = Tensor(0.0)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that were frozen when the op ran stay frozen for this tape
        out._parents = tuple(p if p.requires_grad else _DETACHED for p in parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0] or b.ndim > 2:
        raise GraphError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = ad.T @ g if ad.ndim == 2 else g * ad
        else:
            ga = g @ bd.T
            gb = ad.T @ g if ad.ndim == 2 else np.outer(ad, g)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- activations

def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def hard_tanh(a) -> Tensor:
    """clamp(2*w, -1, 1): slope 2 inside the unsaturated band, 0 outside."""
    a = _wrap(a)
    w = 2.0 * a.data
    out = np.clip(w, -1.0, 1.0)
    slope = np.where(np.abs(w) < 1.0, 2.0, 0.0)
    return _result(out, (a,), lambda g: (g * slope,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def arctan(a) -> Tensor:
    a = _wrap(a)
    d = 1.0 / (1.0 + a.data * a.data)
    return _result(np.arctan(a.data), (a,), lambda g: (g * d,))


def sin(a) -> Tensor:
    a = _wrap(a)
    c = np.cos(a.data)
    return _result(np.sin(a.data), (a,), lambda g: (g * c,))


def cos(a) -> Tensor:
    a = _wrap(a)
    s = np.sin(a.data)
    return _result(np.cos(a.data), (a,), lambda g: (-g * s,))


def tan(a) -> Tensor:
    a = _wrap(a)
    out = np.tan(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 + out * out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


# ------------------------------------------------------------- shape handling

def concat(items, axis: int = 0) -> Tensor:
    items = [_wrap(t) for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _result(out, items, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(items) -> Tensor:
    """Stack scalars or equal-shape tensors along a new leading axis."""
    items = [_wrap(t) for t in items]
    out = np.stack([t.data for t in items])
    return _result(out, items, lambda g: tuple(g[i] for i in range(len(items))))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: {exc}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    return reshape(a, (-1,))


def take(a, idx) -> Tensor:
    """Basic or fancy indexing; gradients scatter back with np.add.at."""
    a = _wrap(a)
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), backward)


def gather_rows(a, index) -> Tensor:
    """Rows ``a[index]`` for an integer index vector (message passing gather)."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    rest = a.shape[1:]

    def backward(g):
        full = np.zeros((n,) + rest)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets (scatter-add)."""
    a = _wrap(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segment_ids, a.data)
    return _result(out, (a,), lambda g: (g[segment_ids],))


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of ``scores`` (E x ...) within groups sharing a segment id.

    Used for attention normalisation over each destination node's incoming
    edges.
    """
    scores = _wrap(scores)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    s = scores.data
    seg_max = np.full((num_segments,) + s.shape[1:], -np.inf)
    np.maximum.at(seg_max, segment_ids, s)
    e = np.exp(s - seg_max[segment_ids])
    denom = np.zeros((num_segments,) + s.shape[1:])
    np.add.at(denom, segment_ids, e)
    alpha = e / denom[segment_ids]

    def backward(g):
        ga = g * alpha
        seg = np.zeros((num_segments,) + s.shape[1:])
        np.add.at(seg, segment_ids, ga)
        return (ga - alpha * seg[segment_ids],)

    return _result(alpha, (scores,), backward)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def smooth_l1(e) -> Tensor:
    """Mean over components of 0.5 e^2 (|e| < 1) or |e| - 0.5."""
    e = _wrap(e)
    x = e.data
    ax = np.abs(x)
    small = ax < 1.0
    per = np.where(small, 0.5 * x * x, ax - 0.5)
    n = max(x.size, 1)
    dper = np.where(small, x, np.sign(x)) / n
    return _result(np.asarray(per.sum() / n), (e,), lambda g: (g * dper,))


# --------------------------------------------------------- finite differences

def numeric_gradient(f, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f()`` w.r.t. each param's data."""
    grads = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def gradient_check(f, params, h: float = 1e-5, floor: float = 1e-7, zero: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error of each entry is |a - n| / max(|a|, |n|, floor, zero * max(1, |f|)):
    entries far below the output scale are where central differences only see roundoff
    (about eps * |f| / h), so they are compared on that scale instead.
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    tiny = max(floor, zero * max(1.0, float(np.max(np.abs(out.data)))))
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_gradient(f, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), tiny)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
