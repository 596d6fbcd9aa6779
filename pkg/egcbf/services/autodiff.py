"""
Minimal define-by-run reverse-mode differentiation over dense float64 arrays.

A ``Tape`` records every op applied to its ``Tensor`` values; ``grad`` walks the
record backwards and returns gradients of a scalar output with respect to any
recorded tensors (parameters and inputs alike). Broadcasting is limited to
row-wise bias addition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from egcbf.config import Config
from egcbf.exceptions import ShapeError, TapeError

_TINY = 1e-300


@dataclass
class _Record:
    out: int
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple]
    op: str


class Tensor:
    __slots__ = ("tape", "id", "value", "name")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", tid: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.id = tid
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor#{self.id}{label}{tuple(self.shape)}"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return self.tape.add(self, other)
        return self.tape.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self.tape.sub(self, other)
        return self.tape.shift(self, -other)

    def __rsub__(self, other):
        return self.tape.shift(self.tape.scale(self, -1.0), other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.tape.mul(self, other)
        return self.tape.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self.tape.div(self, other)
        return self.tape.scale(self, 1.0 / other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, index):
        return self.tape.slice(self, index)

    @property
    def T(self):
        return self.tape.transpose(self)


class Tape:
    def __init__(self, debug: bool | None = None):
        self.debug = Config.DEBUG_MODE if debug is None else debug
        self._values: list[np.ndarray] = []
        self._records: list[_Record] = []

    def __len__(self):
        return len(self._values)

    # ------------------------------------------------------------------
    # Leaves
    # ------------------------------------------------------------------

    def _new(self, value, name=None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        tid = len(self._values)
        self._values.append(value)
        return Tensor(self, tid, value, name)

    def leaf(self, value, name: str | None = None) -> Tensor:
        return self._new(np.array(value, dtype=np.float64, copy=True), name)

    def constant(self, value) -> Tensor:
        return self._new(np.array(value, dtype=np.float64, copy=True))

    def owns(self, t: Tensor) -> bool:
        return isinstance(t, Tensor) and t.tape is self and 0 <= t.id < len(self._values)

    def _wrap(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise TapeError(f"{x!r} belongs to a different tape")
            return x
        return self.constant(x)

    def _record(self, op: str, value, parents: Sequence[Tensor], backward) -> Tensor:
        if self.debug and not np.all(np.isfinite(value)):
            raise TapeError(f"non-finite value produced by op '{op}'")
        out = self._new(value)
        self._records.append(_Record(out.id, tuple(p.id for p in parents), backward, op))
        return out

    # ------------------------------------------------------------------
    # Linear algebra
    # ------------------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            if av.ndim == 2 and bv.ndim == 2:
                return g @ bv.T, av.T @ g
            if av.ndim == 2 and bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            if av.ndim == 1 and bv.ndim == 2:
                return bv @ g, np.outer(av, g)
            return g * bv, g * av

        return self._record("matmul", av @ bv, (a, b), backward)

    def transpose(self, a) -> Tensor:
        a = self._wrap(a)
        if a.value.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
        return self._record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def reshape(self, a, shape) -> Tensor:
        a = self._wrap(a)
        try:
            out = a.value.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from e
        in_shape = a.shape
        return self._record("reshape", out.copy(), (a,), lambda g: (g.reshape(in_shape),))

    def batched_matvec(self, B, U) -> Tensor:
        """(n, k, c) x (n, c) -> (n, k)."""
        B, U = self._wrap(B), self._wrap(U)
        if B.value.ndim != 3 or U.value.ndim != 2 or B.shape[0] != U.shape[0] or B.shape[2] != U.shape[1]:
            raise ShapeError(f"batched_matvec: incompatible shapes {B.shape} and {U.shape}")
        Bv, Uv = B.value, U.value

        def backward(g):
            return np.einsum("nk,nc->nkc", g, Uv), np.einsum("nkc,nk->nc", Bv, g)

        return self._record("batched_matvec", np.einsum("nkc,nc->nk", Bv, Uv), (B, U), backward)

    # ------------------------------------------------------------------
    # Elementwise
    # ------------------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        if a.shape == b.shape:
            return self._record("add", a.value + b.value, (a, b), lambda g: (g, g))
        if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
            return self._record("add", a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def sub(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        if a.shape != b.shape:
            raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
        return self._record("sub", a.value - b.value, (a, b), lambda g: (g, -g))

    def mul(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        if a.shape != b.shape:
            raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def div(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        if a.shape != b.shape:
            raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._record("div", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))

    def scale(self, a, c: float) -> Tensor:
        a = self._wrap(a)
        c = float(c)
        return self._record("scale", a.value * c, (a,), lambda g: (g * c,))

    def shift(self, a, c) -> Tensor:
        a = self._wrap(a)
        c = np.asarray(c, dtype=np.float64)
        if c.ndim and c.shape != a.shape[-c.ndim:]:
            raise ShapeError(f"shift: incompatible shapes {a.shape} and {c.shape}")
        return self._record("shift", a.value + c, (a,), lambda g: (g,))

    def relu(self, a) -> Tensor:
        a = self._wrap(a)
        on = (a.value > 0).astype(np.float64)
        return self._record("relu", a.value * on, (a,), lambda g: (g * on,))

    def tanh(self, a) -> Tensor:
        a = self._wrap(a)
        y = np.tanh(a.value)
        return self._record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def sqrt(self, a) -> Tensor:
        a = self._wrap(a)
        y = np.sqrt(a.value)
        return self._record("sqrt", y, (a,), lambda g: (g * 0.5 / np.maximum(y, _TINY),))

    # ------------------------------------------------------------------
    # Reductions and structure
    # ------------------------------------------------------------------

    def softmax(self, a, mask: np.ndarray | None = None) -> Tensor:
        """Row-wise softmax; entries with mask False receive zero weight."""
        a = self._wrap(a)
        if a.value.ndim != 2:
            raise ShapeError(f"softmax: expected a matrix, got shape {a.shape}")
        logits = a.value
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != logits.shape:
                raise ShapeError(f"softmax: mask shape {mask.shape} does not match {logits.shape}")
            if not np.all(mask.any(axis=1)):
                raise ShapeError("softmax: every row needs at least one unmasked entry")
            logits = np.where(mask, logits, -np.inf)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

        return self._record("softmax", y, (a,), backward)

    def sum(self, a, axis: int | None = None) -> Tensor:
        a = self._wrap(a)
        shape = a.shape
        if axis is None:
            return self._record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))
        out = a.value.sum(axis=axis)
        return self._record(
            "sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
        )

    def mean(self, a) -> Tensor:
        a = self._wrap(a)
        n = a.value.size
        if n == 0:
            raise ShapeError("mean: empty tensor")
        return self.scale(self.sum(a), 1.0 / n)

    def norm(self, a) -> Tensor:
        """L2 norm of all entries; gradient taken as zero at the origin."""
        a = self._wrap(a)
        av = a.value
        nrm = float(np.sqrt(np.sum(av * av)))

        def backward(g):
            if nrm == 0.0:
                return (np.zeros_like(av),)
            return (g * av / nrm,)

        return self._record("norm", np.asarray(nrm), (a,), backward)

    def concat(self, tensors: Sequence, axis: int = 0) -> Tensor:
        ts = [self._wrap(t) for t in tensors]
        if not ts:
            raise ShapeError("concat: no tensors")
        try:
            out = np.concatenate([t.value for t in ts], axis=axis)
        except ValueError as e:
            shapes = ", ".join(str(t.shape) for t in ts)
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from e
        sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def backward(g):
            return tuple(np.split(g, sizes, axis=axis))

        return self._record("concat", out, ts, backward)

    def slice(self, a, index) -> Tensor:
        a = self._wrap(a)
        try:
            out = a.value[index]
        except IndexError as e:
            raise ShapeError(f"slice: index {index!r} out of range for shape {a.shape}") from e
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return self._record("slice", np.array(out, copy=True), (a,), backward)

    def stack_rows(self, tensors: Sequence) -> Tensor:
        """Stack 1-D tensors into a matrix."""
        ts = [self._wrap(t) for t in tensors]
        return self.concat([self.reshape(t, (1, -1)) for t in ts], axis=0)


def grad(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``."""
    if not tape.owns(output):
        raise TapeError(f"output {output!r} was not recorded on this tape")
    if output.value.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    for t in wrt:
        if not tape.owns(t):
            raise TapeError(f"{t!r} is not on this tape")

    wanted = {t.id for t in wrt}
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for rec in reversed(tape._records):
        if rec.out > output.id:
            continue
        g = grads.get(rec.out) if rec.out in wanted else grads.pop(rec.out, None)
        if g is None:
            continue
        for pid, pg in zip(rec.parents, rec.backward(g)):
            pg = np.asarray(pg, dtype=np.float64).reshape(tape._values[pid].shape)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return [
        np.array(grads.get(t.id, np.zeros_like(t.value)), dtype=np.float64, copy=True).reshape(t.shape)
        for t in wrt
    ]


def relative_error(exact: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(exact - numeric) / max(abs(exact), abs(numeric), floor)


def finite_difference_check(fn, inputs: Sequence[np.ndarray], h: float = 1e-5, samples: int | None = None, rng=None):
    """
    Compare autodiff gradients of ``fn(tape, *leaves) -> scalar Tensor`` against central
    differences. Returns the maximum relative error over the sampled coordinates.
    """
    inputs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    analytic = grad(tape, fn(tape, *leaves), leaves)

    def evaluate(arrays):
        t = Tape()
        return float(fn(t, *[t.leaf(a) for a in arrays]).value)

    coords = [(k, idx) for k, x in enumerate(inputs) for idx in np.ndindex(x.shape)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, idx in coords:
        plus = [x.copy() for x in inputs]
        minus = [x.copy() for x in inputs]
        plus[k][idx] += h
        minus[k][idx] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        exact = analytic[k][idx]
        worst = max(worst, relative_error(exact, numeric))
    return worst
