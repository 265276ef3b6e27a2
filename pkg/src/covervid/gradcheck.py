"""Central finite-difference checks for analytic gradients (float64 only)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from covervid.tensor import Tape, Tensor

STEP = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, index, step: float = STEP) -> float:
    """df/dx[index] by central differences; ``f`` re-evaluates the loss from scratch."""
    old = x.values[index]
    x.values[index] = old + step
    hi = f().values.item()
    x.values[index] = old - step
    lo = f().values.item()
    x.values[index] = old
    return (hi - lo) / (2 * step)


def analytic_grads(f: Callable[[], Tensor], tensors) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    out = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    return out


def check_gradients(f: Callable[[], Tensor], tensors: dict[str, Tensor], samples: int | None = None,
                    seed: int = 0, step: float = STEP) -> list[tuple[str, tuple, float, float, float]]:
    """Compare analytic and numeric partial derivatives.

    With ``samples=None`` every coordinate of every tensor is checked;
    otherwise ``samples`` (tensor, coordinate) pairs are drawn uniformly over
    all coordinates. Returns ``(name, index, analytic, numeric, rel_error)``.
    """
    names = list(tensors)
    for k in names:
        if tensors[k].dtype != np.float64:
            raise TypeError(f"gradient checks need float64; {k} is {tensors[k].dtype}")
    grads = dict(zip(names, analytic_grads(f, [tensors[k] for k in names])))
    if samples is None:
        picks = [(k, idx) for k in names for idx in np.ndindex(tensors[k].shape)]
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([tensors[k].values.size for k in names])
        flat = rng.choice(sizes.sum(), size=samples, replace=False)
        bounds = np.cumsum(sizes)
        picks = []
        for j in flat:
            t = int(np.searchsorted(bounds, j, side="right"))
            off = int(j - (bounds[t - 1] if t else 0))
            k = names[t]
            picks.append((k, np.unravel_index(off, tensors[k].shape)))
    out = []
    for k, idx in picks:
        a = float(grads[k][idx])
        n = numeric_grad(f, tensors[k], idx, step)
        out.append((k, tuple(int(i) for i in idx), a, n, relative_error(a, n)))
    return out
