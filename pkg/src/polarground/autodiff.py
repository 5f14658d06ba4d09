"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op is a module-level function that dispatches on its arguments: when
none of them is a Tensor the op is plain numpy (so the same forward code
doubles as a fast value-only evaluator, including batched evaluation for
finite-difference checks), and when a Tensor is involved it records the
backward closure on a tape.

Shapes follow negative-axis conventions throughout so value-mode callers may
prepend arbitrary batch dimensions; tape mode is only exercised unbatched.
"""

from __future__ import annotations

import numpy as np

from polarground import polar as _polar


class Tensor:
    """A node in the backward graph: a value plus contributions to parents."""

    __slots__ = ("value", "grad", "_pairs")

    def __init__(self, value, pairs=()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._pairs = tuple(pairs)  # (parent Tensor, grad_fn(out_grad) -> array)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def shape_of(x) -> tuple:
    return value_of(x).shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the parent's shape."""
    grad = np.asarray(grad, dtype=float)
    if shape == ():
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into .grad for every node on the tape."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._pairs:
            if id(parent) not in visited:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, grad_fn in node._pairs:
            contribution = grad_fn(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contribution


def _binary(a, b, value, grad_a, grad_b):
    if not (is_tensor(a) or is_tensor(b)):
        return value
    pairs = []
    if is_tensor(a):
        pairs.append((a, grad_a))
    if is_tensor(b):
        pairs.append((b, grad_b))
    return Tensor(value, pairs)


def _unary(x, value, grad_fn):
    if not is_tensor(x):
        return value
    return Tensor(value, [(x, grad_fn)])


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(
        a,
        b,
        av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(
        a,
        b,
        av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(
        a,
        b,
        av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(
        a,
        b,
        av / bv,
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
    )


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1 and av.ndim == 1:
            return _unbroadcast(g * bv, av.shape)
        if bv.ndim == 1:
            return _unbroadcast(g[..., None] * bv, av.shape)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def grad_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return _unbroadcast(g * av, bv.shape)
        if av.ndim == 1:
            return _unbroadcast(av[:, None] * g[..., None, :], bv.shape)
        if bv.ndim == 1:
            return _unbroadcast(
                (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0], bv.shape
            )
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _binary(a, b, out, grad_a, grad_b)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = value_of(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def sqrt(x):
    out = np.sqrt(value_of(x))
    return _unary(x, out, lambda g: g * 0.5 / out)


def sin(x):
    xv = value_of(x)
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(x):
    xv = value_of(x)
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv))


def relu(x):
    xv = value_of(x)
    return _unary(x, np.maximum(xv, 0.0), lambda g: g * (xv > 0.0))


def softplus(x):
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    return _unary(x, out, lambda g: g / (1.0 + np.exp(-xv)))


def maximum(x, other):
    """Elementwise max against a constant (or a second tensor)."""
    xv, ov = value_of(x), value_of(other)
    out = np.maximum(xv, ov)
    return _binary(
        x,
        other,
        out,
        lambda g: _unbroadcast(g * (xv >= ov), xv.shape),
        lambda g: _unbroadcast(g * (xv < ov), ov.shape),
    )


def atan2(y, x):
    yv, xv = value_of(y), value_of(x)
    denom = xv * xv + yv * yv
    return _binary(
        y,
        x,
        np.arctan2(yv, xv),
        lambda g: _unbroadcast(g * xv / denom, yv.shape),
        lambda g: _unbroadcast(-g * yv / denom, xv.shape),
    )


def log_bessel_i0(x):
    """log I0(x); the derivative is the Bessel ratio I1/I0."""
    xv = value_of(x)
    flat = np.ravel(np.asarray(xv, dtype=float))
    out = np.array([_polar.log_bessel_i0(float(v)) for v in flat]).reshape(
        np.shape(xv)
    )
    if not is_tensor(x):
        return out
    ratio = np.array(
        [_polar.bessel_i(1, float(v)) / _polar.bessel_i(0, float(v)) for v in flat]
    ).reshape(np.shape(xv))
    return Tensor(out, [(x, lambda g: g * ratio)])


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).astype(float)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, xv.shape).astype(float)

    return _unary(x, out, grad)


def reduce_mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    count = xv.size if axis is None else xv.shape[axis]
    return div(reduce_sum(x, axis=axis, keepdims=keepdims), float(count))


def reduce_max(x, axis, keepdims=False):
    """Max along one axis; ties share the incoming gradient equally across
    all attaining entries (the standard subgradient choice)."""
    xv = value_of(x)
    out = xv.max(axis=axis, keepdims=keepdims)

    def grad(g):
        out_keep = xv.max(axis=axis, keepdims=True)
        mask = (xv == out_keep).astype(float)
        mask /= mask.sum(axis=axis, keepdims=True)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return mask * g_exp

    return _unary(x, out, grad)


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def swapaxes(x, a, b):
    xv = value_of(x)
    return _unary(x, np.swapaxes(xv, a, b), lambda g: np.swapaxes(g, a, b))


def take(x, indices, axis):
    """Gather along an axis; backward scatter-adds into the source."""
    xv = value_of(x)
    idx = np.asarray(indices, dtype=int)
    out = np.take(xv, idx, axis=axis)

    def grad(g):
        full = np.zeros_like(xv)
        pos_axis = axis % xv.ndim
        moved = np.moveaxis(full, pos_axis, 0)
        g_moved = np.moveaxis(g, pos_axis, 0)
        np.add.at(moved, idx, g_moved)
        return full

    return _unary(x, out, grad)


def concat(parts, axis=-1):
    values = [value_of(p) for p in parts]
    if not any(is_tensor(p) for p in parts):
        # Value mode tolerates mismatched leading (batch) dims.
        lead = np.broadcast_shapes(*[v.shape[:-1] for v in values])
        values = [np.broadcast_to(v, lead + v.shape[-1:]) for v in values]
        return np.concatenate(values, axis=axis)
    if axis != -1:
        raise NotImplementedError("tape concat supports axis=-1 only")
    out = np.concatenate(values, axis=-1)
    pairs = []
    offset = 0
    for part, v in zip(parts, values):
        width = v.shape[-1]
        if is_tensor(part):
            def grad(g, start=offset, stop=offset + width):
                return g[..., start:stop]

            pairs.append((part, grad))
        offset += width
    return Tensor(out, pairs)


def tile_rows(x, n):
    """Insert a row axis before the last and repeat n times:
    (..., d) -> (..., n, d)."""
    xv = value_of(x)
    out = np.broadcast_to(
        xv[..., None, :], xv.shape[:-1] + (n,) + xv.shape[-1:]
    )
    if not is_tensor(x):
        return np.ascontiguousarray(out)
    return Tensor(out, [(x, lambda g: g.sum(axis=-2))])


def softmax(x, axis=-1):
    shifted = sub(x, reduce_max(x, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, reduce_sum(e, axis=axis, keepdims=True))
