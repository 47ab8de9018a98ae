"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations as they execute; calling
:meth:`Tape.backward` on a scalar result replays the record in exact reverse
order and accumulates gradients for every leaf registered on the tape.
Tensors without a tape evaluate eagerly with no recording, which is the
fast path used for inference.

Only the shapes this pipeline needs are supported: 2-D matrices, row/column
vectors and scalars, plus ragged-batch helpers (``segment_softmax``,
``segment_sum``, ``fold_rows``) that process a stack of variable-length bags
in a single call.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import special
from .errors import DomainError, ShapeError, StateError


class Tensor:
    """Immutable-by-convention dense array of 64-bit reals.

    Values are validated to be finite at construction; operations assume
    their inputs satisfy this and do not re-check intermediates.
    """

    __slots__ = ("values", "tape", "_nid")

    def __init__(self, values, tape: "Tape | None" = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("Tensor values must be finite (no NaN/Inf)")
        self.values = arr
        self.tape = tape
        self._nid = -1 if tape is None else tape._new_node()

    @classmethod
    def _make(cls, values: np.ndarray, tape: "Tape | None") -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.tape = tape
        t._nid = -1 if tape is None else tape._new_node()
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Grads:
    """Per-node gradient accumulators for one backward pass.

    Arrays handed to :meth:`add` may be borrowed (views of other nodes'
    accumulators, or read-only broadcasts); they are only mutated in place
    once this container owns a private copy.
    """

    __slots__ = ("data", "_owned")

    def __init__(self, n: int):
        self.data: list[np.ndarray | None] = [None] * n
        self._owned = bytearray(n)

    def add(self, nid: int, arr: np.ndarray) -> None:
        cur = self.data[nid]
        if cur is None:
            self.data[nid] = arr
        elif self._owned[nid]:
            cur += arr
        else:
            self.data[nid] = cur + arr
            self._owned[nid] = 1

    def add_rows(self, nid: int, start: int, stop: int, arr: np.ndarray,
                 shape: tuple[int, ...]) -> None:
        cur = self.data[nid]
        if cur is None:
            cur = np.zeros(shape)
            self.data[nid] = cur
            self._owned[nid] = 1
        elif not self._owned[nid]:
            cur = np.array(cur)
            self.data[nid] = cur
            self._owned[nid] = 1
        cur[start:stop] += arr


class Tape:
    """Ordered operation record with gradient accumulators.

    One-shot by default: a second :meth:`backward` without :meth:`reset`
    raises :class:`StateError`. Replays are deterministic; two backward
    passes over the same record yield bitwise-identical gradients.
    """

    def __init__(self):
        self._entries: list[tuple[int, Callable[[np.ndarray, _Grads], None]]] = []
        self._n_nodes = 0
        self._leaves: list[Tensor] = []
        self._finished = False

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def _record(self, out_nid: int, backward: Callable[[np.ndarray, _Grads], None]) -> None:
        if self._finished:
            raise StateError("tape already consumed by backward(); call reset()")
        self._entries.append((out_nid, backward))

    def leaf(self, values) -> Tensor:
        """Register an array as a differentiable leaf (parameter)."""
        t = Tensor(values, tape=self)
        self._leaves.append(t)
        return t

    def reset(self) -> None:
        """Allow another backward pass over the same record."""
        self._finished = False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate and return gradients of ``loss`` for every leaf."""
        if self._finished:
            raise StateError("backward() called twice without reset()")
        if loss.tape is not self:
            raise StateError("loss was not produced on this tape")
        if loss.values.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._finished = True
        grads = _Grads(self._n_nodes)
        grads.data[loss._nid] = np.ones_like(loss.values)
        grads._owned[loss._nid] = 1
        for out_nid, fn in reversed(self._entries):
            g = grads.data[out_nid]
            if g is not None:
                fn(g, grads)
        return {
            t: (grads.data[t._nid] if grads.data[t._nid] is not None
                else np.zeros_like(t.values))
            for t in self._leaves
        }


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        tp = t.tape
        if tp is not None:
            if tape is None:
                tape = tp
            elif tape is not tp:
                raise StateError("operands belong to different tapes")
    return tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    try:
        out_values = fwd(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    out = Tensor._make(out_values, tape)
    if tape is not None:
        a_id = a._nid if a.tape is not None else -1
        b_id = b._nid if b.tape is not None else -1
        av, bv, ov = a.values, b.values, out_values

        def backward(g, grads):
            if a_id >= 0:
                grads.add(a_id, _unbroadcast(bwd_a(g, av, bv, ov), av.shape))
            if b_id >= 0:
                grads.add(b_id, _unbroadcast(bwd_b(g, av, bv, ov), bv.shape))

        tape._record(out._nid, backward)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(a) -> Tensor:
    return _unary(a, lambda x: -x, lambda g, x, o: -g)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    return _binary(a, b, lambda x, y: x @ y,
                   lambda g, x, y, o: g @ y.T, lambda g, x, y, o: x.T @ g)


def _unary(a, fwd, bwd) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out_values = fwd(a.values)
    out = Tensor._make(out_values, tape)
    if tape is not None:
        a_id, av, ov = a._nid, a.values, out_values
        tape._record(out._nid, lambda g, grads: grads.add(a_id, bwd(g, av, ov)))
    return out


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.size and not np.all(a.values > 0.0):
        raise DomainError("log requires strictly positive input")
    return _unary(a, np.log, lambda g, x, o: g / x)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/inf = 0 is the
    # correct limit, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid_values, lambda g, x, o: g * o * (1.0 - o))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0.0))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    return _unary(
        a,
        lambda x: np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))),
        lambda g, x, o: g * _sigmoid_values(x),
    )


def lgamma(a) -> Tensor:
    return _unary(a, special.lgamma, lambda g, x, o: g * special.digamma(x))


def digamma(a) -> Tensor:
    # Derivative kernel is the trigamma function.
    return _unary(a, special.digamma, lambda g, x, o: g * special.trigamma(x))


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    return _unary(a, lambda x: np.maximum(x, floor), lambda g, x, o: g * (x > floor))


def clamp_max(a, ceil: float) -> Tensor:
    """Elementwise min(a, ceil); gradient passes only where a < ceil."""
    return _unary(a, lambda x: np.minimum(x, ceil), lambda g, x, o: g * (x < ceil))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _unary(a, lambda x: x.T.copy(), lambda g, x, o: g.T)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, x, o):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return _unary(a, lambda x: x.sum(axis=axis, keepdims=keepdims), bwd)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]

    def bwd(g, x, o):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, x.shape)

    return _unary(a, lambda x: x.mean(axis=axis, keepdims=keepdims), bwd)


def softmax(a, axis: int = 1) -> Tensor:
    def fwd(x):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def bwd(g, x, o):
        return o * (g - (g * o).sum(axis=axis, keepdims=True))

    return _unary(a, fwd, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    tape = _tape_of(*tensors)
    try:
        out_values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    out = Tensor._make(out_values, tape)
    if tape is not None:
        ids = [t._nid if t.tape is not None else -1 for t in tensors]
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def backward(g, grads):
            for i, nid in enumerate(ids):
                if nid >= 0:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    grads.add(nid, g[tuple(sl)])

        tape._record(out._nid, backward)
    return out


def narrow(a, start: int, stop: int) -> Tensor:
    """Contiguous row slice a[start:stop] along axis 0."""
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"narrow [{start}:{stop}] out of bounds for {a.shape}")
    tape = a.tape
    out = Tensor._make(a.values[start:stop].copy(), tape)
    if tape is not None:
        a_id, shape = a._nid, a.values.shape
        tape._record(
            out._nid,
            lambda g, grads: grads.add_rows(a_id, start, stop, g, shape),
        )
    return out


def _segment_starts(lengths: np.ndarray, total: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.intp)
    if lengths.size == 0 or np.any(lengths < 1):
        raise ShapeError("segment lengths must be positive")
    if int(lengths.sum()) != total:
        raise ShapeError("segment lengths must sum to the row count")
    starts = np.zeros(lengths.size, dtype=np.intp)
    np.cumsum(lengths[:-1], out=starts[1:])
    return starts


def segment_softmax(a, lengths) -> Tensor:
    """Softmax over consecutive row segments, independently per column."""
    a = _as_tensor(a)
    lengths = np.asarray(lengths, dtype=np.intp)
    starts = _segment_starts(lengths, a.shape[0])

    def fwd(x):
        m = np.maximum.reduceat(x, starts, axis=0)
        e = np.exp(x - np.repeat(m, lengths, axis=0))
        z = np.add.reduceat(e, starts, axis=0)
        return e / np.repeat(z, lengths, axis=0)

    def bwd(g, x, o):
        t = g * o
        seg = np.add.reduceat(t, starts, axis=0)
        return t - o * np.repeat(seg, lengths, axis=0)

    return _unary(a, fwd, bwd)


def segment_sum(a, lengths) -> Tensor:
    """Sum consecutive row segments: (sum(lengths), k) -> (len(lengths), k)."""
    a = _as_tensor(a)
    lengths = np.asarray(lengths, dtype=np.intp)
    starts = _segment_starts(lengths, a.shape[0])
    return _unary(
        a,
        lambda x: np.add.reduceat(x, starts, axis=0),
        lambda g, x, o: np.repeat(g, lengths, axis=0),
    )


def fold_rows(a, group: int) -> Tensor:
    """Sum consecutive fixed-size groups of rows: (b*group, k) -> (b, k)."""
    a = _as_tensor(a)
    rows = a.shape[0]
    if group < 1 or rows % group:
        raise ShapeError(f"cannot fold {rows} rows into groups of {group}")
    b = rows // group
    return _unary(
        a,
        lambda x: x.reshape(b, group, -1).sum(axis=1) if x.ndim == 2
        else x.reshape(b, group).sum(axis=1),
        lambda g, x, o: np.repeat(g, group, axis=0),
    )


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout recorded as a mask multiplication."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor._make(mask, None))


def grad_check(f: Callable[..., Tensor], params: Sequence[np.ndarray],
               h: float = 1e-5) -> float:
    """Max relative disagreement between backward() and central differences.

    ``f`` must build a scalar Tensor from its Tensor arguments and be
    re-evaluable; finite-difference probes call it eagerly (no tape).
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    grads = tape.backward(f(*leaves))
    analytic = [grads[t] for t in leaves]

    def value_at(idx: int, replacement: np.ndarray) -> float:
        args = [Tensor(replacement if q == idx else params[q])
                for q in range(len(params))]
        return float(f(*args).values.reshape(-1)[0])

    worst = 0.0
    for i, base in enumerate(params):
        an = analytic[i].reshape(-1)
        for j in range(base.size):
            probe = base.copy().reshape(-1)
            probe[j] += h
            up = value_at(i, probe.reshape(base.shape))
            probe[j] -= 2.0 * h
            down = value_at(i, probe.reshape(base.shape))
            cd = (up - down) / (2.0 * h)
            rel = abs(an[j] - cd) / (abs(an[j]) + abs(cd) + 1e-12)
            worst = max(worst, rel)
    return worst
