"""Dense tensors with a reverse-mode computation record.

Operations record themselves on the active :class:`Tape` (set with a
``with Tape():`` block) whenever at least one input tracks gradients.
Outside a tape, operations run in inference mode and record nothing.
"""

from __future__ import annotations

import contextvars
import itertools

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "covervid_active_tape", default=None
)
_NODE_IDS = itertools.count()


class ShapeError(ValueError):
    pass


class StaleRecordError(RuntimeError):
    """Raised when backward is replayed on a consumed or foreign record."""


class Tensor:
    """Row-major array with an optional gradient buffer.

    ``grad`` is allocated lazily and only for tensors with
    ``requires_grad=True``.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_NODE_IDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms in ``covervid.ops`` are canonical
    def __add__(self, other):
        from covervid import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from covervid import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from covervid import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from covervid import ops

        return ops.matmul(self, other)


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StaleRecordError("cannot reuse a tape after backward")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        if self.consumed:
            raise StaleRecordError("tape already consumed by backward")
        self.entries.append(_Entry(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise StaleRecordError("backward already replayed; run a new forward pass")
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(e.output is loss for e in self.entries):
            raise StaleRecordError("loss is not downstream of this computation record")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        produced = set()
        for entry in reversed(self.entries):
            produced.add(entry.output.node_id)
            g = grads.pop(entry.output.node_id, None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"gradient shape {gi.shape} does not match {t.shape}")
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for t in _collect_leaves(self.entries, produced):
            g = grads.get(t.node_id)
            if g is not None:
                t.accumulate(g)
        self.entries.clear()
        self.consumed = True


def _collect_leaves(entries, produced: set[int]) -> list[Tensor]:
    seen: set[int] = set()
    leaves = []
    for e in entries:
        for t in e.inputs:
            if t.requires_grad and t.node_id not in produced and t.node_id not in seen:
                seen.add(t.node_id)
                leaves.append(t)
    return leaves


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every tracked leaf upstream of ``loss``.

    Uses the tape currently active, or the one passed explicitly. The tape
    is cleared afterward; a second call raises :class:`StaleRecordError`.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise StaleRecordError("no computation record: run the forward pass inside a Tape")
    tape.backward(loss)


def make_result(values: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap ``values`` as an op output and record it when gradients are needed."""
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out
