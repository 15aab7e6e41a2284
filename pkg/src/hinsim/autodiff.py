"""Small reverse-mode differentiation kernel over 2-D float64 arrays.

Only the primitives the path encoder needs are provided. Every op accepts
:class:`Tensor` inputs; when none of the inputs belongs to a :class:`Tape`
the op just computes values (inference mode).

Subgradient conventions: ReLU'(0) = 0, and max/top-T selection routes the
gradient to the winning candidate only, ties going to the lowest candidate
index.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("value", "tape", "slot")

    def __init__(self, value, tape: "Tape | None" = None, slot: int = -1, _owned: bool = False):
        if _owned and isinstance(value, np.ndarray) and value.dtype == np.float64 and value.ndim == 2:
            value = value.view()
        else:
            value = np.array(value, dtype=np.float64, copy=True, ndmin=2)
        if value.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {value.shape}")
        value.setflags(write=False)
        self.value = value
        self.tape = tape
        self.slot = slot

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, slot={self.slot})"


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered op log; each record only reads slots written before it."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[_Record] = []
        self.params: dict[str, int] = {}
        self.selections: list[np.ndarray] = []

    def _new(self, value: np.ndarray, owned: bool = False) -> Tensor:
        t = Tensor(value, self, len(self.values), _owned=owned)
        self.values.append(t.value)
        return t

    def param(self, value, name: str) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = self._new(value)
        self.params[name] = t.slot
        return t

    def record(self, op, inputs: Sequence[Tensor], value, backward) -> Tensor:
        out = self._new(value, owned=True)
        self.records.append(_Record(op, tuple(t.slot for t in inputs), out.slot, backward))
        return out

    def selection_signature(self) -> str:
        """Digest of every discrete choice made so far (pooling winners, ReLU masks)."""
        h = hashlib.sha256()
        for s in self.selections:
            h.update(np.ascontiguousarray(s).tobytes())
        return h.hexdigest()


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _emit(op, inputs, value, backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value, _owned=True)
    # constants get a slot so records can reference them; their grads are dropped
    ins = [t if t.tape is tape else tape._new(t.value, owned=True) for t in inputs]
    return tape.record(op, ins, value, backward)


def constant(value) -> Tensor:
    return Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.value.T, lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}")
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias broadcast over rows; ``bias`` is 1 x cols."""
    if bias.shape != (1, x.shape[1]):
        raise ValueError(f"bias shape {bias.shape} does not fit {x.shape}")
    return _emit("add_row", (x, bias), x.value + bias.value, lambda g: (g, g.sum(axis=0, keepdims=True)))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack along ``axis`` (0: rows, 1: columns); gradient slices pass straight through."""
    if not parts:
        raise ValueError("concat of nothing")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ValueError(f"concat shape mismatch {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=axis)

    def back(g):
        if axis == 0:
            return [g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _emit("concat", tuple(parts), value, back)


def _scatter_rows(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    cols = g.shape[1]
    flat = (idx[:, None] * cols + np.arange(cols)[None, :]).ravel()
    return np.bincount(flat, weights=g.ravel(), minlength=n * cols).reshape(n, cols)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    return _emit("gather_rows", (x,), x.value[idx], lambda g: (_scatter_rows(idx, g, n),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    tape = _tape_of(x)
    if tape is not None:
        tape.selections.append(np.packbits(mask))
    return _emit("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def mse(pred: Tensor, label) -> Tensor:
    """Mean of squared differences over all entries, as a 1 x 1 tensor."""
    label = label.value if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    label = label.reshape(pred.shape)
    m = pred.value.size
    if m == 0:
        raise ValueError("mse of an empty prediction")
    diff = pred.value - label
    return _emit("mse", (pred,), np.array([[np.mean(diff * diff)]]), lambda g: (g[0, 0] * 2.0 * diff / m,))


def segment_topT(x: Tensor, seg, n_seg: int, T: int, selection: str = "elementwise") -> tuple[Tensor, np.ndarray]:
    """Per segment and per column, the T largest candidate rows.

    Returns a (T * n_seg, cols) tensor, slot-major (rows ``i*n_seg + s`` hold
    slot ``i`` of segment ``s``), and the winning row index for every
    (slot, segment, column), -1 for empty segments. Candidate order for ties
    is row order. A segment with fewer than T candidates repeats its best one.

    ``selection="vector"`` ranks whole candidate rows by their sum instead of
    ranking every column independently.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if selection not in ("elementwise", "vector"):
        raise ValueError(f"unknown selection mode {selection!r}")
    seg = np.asarray(seg, dtype=np.int64)
    v = x.value
    n, d = v.shape
    counts = np.bincount(seg, minlength=n_seg)[:n_seg]
    route = np.full((T, n_seg, d), -1, dtype=np.int64)
    live = np.flatnonzero(counts)
    if len(live):
        # group candidates by segment, keeping row order inside each group for the tie rule
        perm = np.argsort(seg, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[live]
        key = v if selection == "elementwise" else np.broadcast_to(v.sum(axis=1, keepdims=True), (n, d))
        work = key[perm].copy()
        position = np.broadcast_to(np.arange(n)[:, None], (n, d))
        cols = np.arange(d)[None, :]
        reps = counts[live]
        top = None
        for i in range(T):
            best = np.maximum.reduceat(work, starts, axis=0)
            hit = work == np.repeat(best, reps, axis=0)
            first = np.minimum.reduceat(np.where(hit, position, n), starts, axis=0)
            if top is None:
                top = first
            else:
                first = np.where(np.isneginf(best), top, first)
            route[i, live] = perm[first]
            work[first, np.broadcast_to(cols, first.shape)] = -np.inf
    cols = np.broadcast_to(np.arange(d), route.shape)
    ok = route >= 0
    out = np.zeros((T, n_seg, d))
    out[ok] = v[route[ok], cols[ok]]
    tape = _tape_of(x)
    if tape is not None:
        tape.selections.append(route)

    def back(g):
        g = g.reshape(T, n_seg, d)
        flat = (route[ok] * d + cols[ok])
        return (np.bincount(flat, weights=g[ok], minlength=n * d).reshape(n, d),)

    return _emit("topT_select", (x,), out.reshape(T * n_seg, d), back), route


def _segment_matrix(seg: np.ndarray, n_seg: int, n: int, weights=None) -> sp.csr_matrix:
    w = np.ones(n) if weights is None else weights
    return sp.csr_matrix((w, (seg, np.arange(n))), shape=(n_seg, n))


def segment_reduce(x: Tensor, seg, n_seg: int, mode: str) -> Tensor:
    """Per-segment mean, sum or max of candidate rows; empty segments give zeros."""
    seg = np.asarray(seg, dtype=np.int64)
    if mode == "max":
        out, _ = segment_topT(x, seg, n_seg, 1)
        return out
    n = x.shape[0]
    if mode == "sum":
        s = _segment_matrix(seg, n_seg, n)
    elif mode == "mean":
        counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
        s = _segment_matrix(seg, n_seg, n, 1.0 / counts[seg]) if n else _segment_matrix(seg, n_seg, 0)
    else:
        raise ValueError(f"unknown reduction {mode!r}")
    st = s.T.tocsr()
    return _emit(f"segment_{mode}", (x,), np.asarray(s @ x.value), lambda g: (np.asarray(st @ g),))


def _stack(candidates: Sequence[Tensor]) -> Tensor:
    if len(candidates) == 0:
        raise ValueError("no candidates")
    return concat([c if c.shape[0] == 1 else transpose(c) for c in candidates], axis=0)


def topT_select(candidates: Sequence[Tensor], T: int) -> tuple[list[Tensor], np.ndarray]:
    """Element-wise top-T over a list of equal-length vectors.

    Returns T vectors (row ``i`` of the result holds the i-th largest value per
    position) and the winning candidate index per (slot, position).
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    stacked = _stack(candidates)
    out, route = segment_topT(stacked, np.zeros(stacked.shape[0], dtype=np.int64), 1, T)
    return [gather_rows(out, [i]) for i in range(T)], route[:, 0, :]


def reduce_mean(candidates: Sequence[Tensor]) -> Tensor:
    s = _stack(candidates)
    return segment_reduce(s, np.zeros(s.shape[0], dtype=np.int64), 1, "mean")


def reduce_sum(candidates: Sequence[Tensor]) -> Tensor:
    s = _stack(candidates)
    return segment_reduce(s, np.zeros(s.shape[0], dtype=np.int64), 1, "sum")


def reduce_max(candidates: Sequence[Tensor]) -> Tensor:
    s = _stack(candidates)
    return segment_reduce(s, np.zeros(s.shape[0], dtype=np.int64), 1, "max")


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter registered on ``tape``."""
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be 1 x 1, got {loss.shape}")
    if loss.tape not in (tape, None):
        raise ValueError("loss does not belong to this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.values)
    if loss.tape is tape:
        grads[loss.slot] = np.ones((1, 1))
    for rec in reversed(tape.records):
        g = grads[rec.output]
        if g is None:
            continue
        for slot, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            grads[slot] = gi if grads[slot] is None else grads[slot] + gi
    out = {}
    for name, slot in tape.params.items():
        g = grads[slot]
        if g is None:
            warnings.warn(f"parameter {name!r} does not reach the loss; gradient set to zero", stacklevel=2)
            g = np.zeros_like(tape.values[slot])
        out[name] = np.asarray(g, dtype=np.float64).reshape(tape.values[slot].shape)
    return out
