"""Differentiable primitives.

Shapes must match exactly except where an op says otherwise; the only
implicit broadcast is :func:`add_bias` over the last axis. Everything else
goes through :func:`broadcast_to`, :func:`reshape` or :func:`transpose`.
"""

from __future__ import annotations

import math

import numpy as np

from covervid.tensor import ShapeError, Tensor, make_result


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.values)):
        raise ValueError(f"{op}: non-finite input")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.values, b.values
    return make_result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.values * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` broadcast over every axis but the last."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    lead = x.values.ndim - 1

    def back(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0) if lead else g

    return make_result(x.values + bias.values, (x, bias), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return make_result(av @ bv, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight (+ bias)`` to the last axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add_bias(out, bias)
    return reshape(out, lead + (weight.shape[1],))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    vals = x.values.reshape(shape)
    return make_result(vals, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    vals = np.ascontiguousarray(np.transpose(x.values, axes))
    return make_result(vals, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def broadcast_to(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Tile ``x`` over new leading axes: result shape is ``lead + x.shape``."""
    lead = tuple(lead)
    vals = np.ascontiguousarray(np.broadcast_to(x.values, lead + x.shape))
    k = len(lead)

    def back(g):
        return (g.reshape((-1,) + x.shape).sum(axis=0) if k else g,)

    return make_result(vals, (x,), back)


def concat(xs: list[Tensor], axis: int) -> Tensor:
    ref = xs[0].shape
    nd = len(ref)
    axis = axis % nd
    for t in xs[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return make_result(np.concatenate([t.values for t in xs], axis=axis), tuple(xs), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.values[idx]), (x,), back)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather along the first axis."""
    rows = np.asarray(rows, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, rows, g)
        return (full,)

    return make_result(x.values[rows], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.values.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    return make_result(
        np.asarray(x.values.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    )


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def back(g):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), shape)) / n,)

    return make_result(x.values.mean(axis=axis), (x,), back)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.values
    c = math.sqrt(2.0 / math.pi)
    v2 = v * v
    inner = c * v * (1.0 + 0.044715 * v2)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def back(g):
        d_inner = c * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner),)

    return make_result(out, (x,), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: needs a last axis of extent >= 1")
    _check_finite(x, "softmax_lastdim")
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis {d}")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def back(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return make_result(xhat * gv + bias.values, (x, gain, bias), back)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be batch x classes, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch of {b}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"cross_entropy: label {int(labels[i])} at index {i} outside [0, {c})")
    logp = log_softmax_np(logits.values)
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), back)
