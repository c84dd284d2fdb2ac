"""Dense reverse-mode autodiff on numpy arrays.

Every op takes and returns :class:`Tensor`. While a :class:`Tape` is active
(``with Tape() as tape:``) each op is recorded together with a closure that
propagates the output gradient to its parents; outside a tape the ops only
compute values. All arithmetic is float64.

Shape rules (no broadcasting anywhere):

=====================  ==========================================  =============
op                     operands                                    result
=====================  ==========================================  =============
matmul                 [n, k] @ [k, m]                             [n, m]
add, sub, mul          identical shapes                            same
scale, neg             any, python scalar                          same
add_rowvec             [n, m], [m]                                 [n, m]
relu, exp, log         any                                         same
transpose              [n, m]                                      [m, n]
reshape                any, new shape with same size               new shape
gather_rows            [n, ...], int index [r]                     [r, ...]
take_along_rows        [n, m], int index [n]                       [n]
scatter_mean           [r, m], int segment ids [r], count n        [n, m]
concat                 list of arrays, axis                        joined
l2_normalize_rows      [n, m]                                      [n, m]
dot_rows               [n, m], [n, m]                              [n]
sum, mean              any                                         scalar
sum_rows               [n, m]                                      [n]
logsumexp_rows         [n, m], optional bool mask [n, m]           [n]
log_softmax_rows       [n, m], optional bool mask [n, m]           [n, m]
=====================  ==========================================  =============

Masked reductions ignore entries where the mask is False; ``log_softmax_rows``
writes 0 at masked entries and passes no gradient through them. Every row of
a mask must keep at least one entry.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value in output")


class TapeError(RuntimeError):
    pass


_ids = itertools.count()
_active: list["Tape"] = []

# Transient zero-norm rows seen by l2_normalize_rows.
zero_norm_count = 0


class Tensor:
    """A float64 array with a lazily allocated gradient."""

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, value={self.value!r})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def constant(x) -> Tensor:
    return Tensor(x)


class Tape:
    """Records ops in execution order; ``backward`` replays them in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        self.records.append((out, parents, rule))

    def reset(self) -> None:
        self.records.clear()
        self._done = False

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise TapeError("tape is empty")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for out, parents, rule in reversed(self.records):
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not _tracks(parent):
                    continue
                if parent.requires_grad:
                    parent._accumulate(pg)
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
        self._done = True


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or getattr(t, "_recorded", False)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` below ``loss``."""
    tape = tape or (_active[-1] if _active else None)
    if tape is None:
        raise TapeError("no tape to run backward on")
    tape.backward(loss)


def _emit(op: str, value: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericalError(op)
    out = Tensor(value)
    if _active and any(_tracks(p) for p in parents):
        out._recorded = True
        _active[-1].record(out, tuple(parents), rule)
    return out


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(op, *shapes)


# ---------------------------------------------------------------- arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a.shape, b.shape)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    _check(a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0],
           "add_rowvec", a.shape, b.shape)
    return _emit("add_rowvec", a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def transpose(a: Tensor) -> Tensor:
    _check(a.value.ndim == 2, "transpose", a.shape)
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check(int(np.prod(shape)) == a.size, "reshape", a.shape, shape)
    old = a.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------ index plumbing


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    _check(index.ndim == 1 and (index.size == 0 or (index.min() >= 0 and index.max() < a.shape[0])),
           "gather_rows", a.shape, index.shape)
    n = a.shape[0]

    def rule(g):
        if index.size == 0:
            return (np.zeros_like(a.value),)
        flat = g.reshape(index.size, -1)
        sel = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                            shape=(n, index.size))
        return ((sel @ flat).reshape(a.shape),)

    return _emit("gather_rows", a.value[index], (a,), rule)


def take_along_rows(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row."""
    index = np.asarray(index, dtype=np.int64)
    _check(a.value.ndim == 2 and index.shape == (a.shape[0],), "take_along_rows",
           a.shape, index.shape)
    rows = np.arange(a.shape[0])

    def rule(g):
        full = np.zeros_like(a.value)
        full[rows, index] = g
        return (full,)

    return _emit("take_along_rows", a.value[rows, index], (a,), rule)


def segment_matrix(segments, n: int) -> sp.csr_matrix:
    """Row-stochastic [n, r] matrix averaging rows that share a segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n).astype(np.float64)
    weights = 1.0 / counts[segments] if segments.size else np.zeros(0)
    return sp.csr_matrix((weights, (segments, np.arange(segments.size))),
                         shape=(n, segments.size))


def scatter_mean(a: Tensor, segments, n: int, matrix: sp.csr_matrix | None = None) -> Tensor:
    """Mean of the rows of ``a`` per segment id; empty segments get zeros.

    ``matrix`` may carry a prebuilt :func:`segment_matrix` for the same ids.
    """
    segments = np.asarray(segments, dtype=np.int64)
    _check(a.value.ndim == 2 and segments.shape == (a.shape[0],)
           and (segments.size == 0 or (segments.min() >= 0 and segments.max() < n)),
           "scatter_mean", a.shape, segments.shape)
    S = segment_matrix(segments, n) if matrix is None else matrix
    ST = S.T.tocsr()
    return _emit("scatter_mean", np.asarray(S @ a.value), (a,),
                 lambda g: (np.asarray(ST @ g),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [t.value for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- row kernels


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Unit-norm rows; an all-zero row stays zero and is counted."""
    global zero_norm_count
    _check(a.value.ndim == 2, "l2_normalize_rows", a.shape)
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    zero_norm_count += int(zero.sum())
    safe = np.where(norms == 0.0, 1.0, norms)
    out = a.value / safe
    out[zero] = 0.0

    def rule(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        ga = (g - out * proj) / safe
        ga[zero] = 0.0
        return (ga,)

    return _emit("l2_normalize_rows", out, (a,), rule)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    _check(a.value.ndim == 2 and a.shape == b.shape, "dot_rows", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("dot_rows", (av * bv).sum(axis=1), (a, b),
                 lambda g: (g[:, None] * bv, g[:, None] * av))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _emit("sum", np.array(a.value.sum()), (a,),
                 lambda g: (np.full_like(a.value, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit("mean", np.array(a.value.mean()), (a,),
                 lambda g: (np.full_like(a.value, float(g) / n),))


def sum_rows(a: Tensor) -> Tensor:
    _check(a.value.ndim == 2, "sum_rows", a.shape)
    return _emit("sum_rows", a.value.sum(axis=1), (a,),
                 lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),))


def _mask_for(a: Tensor, mask, op: str) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    _check(mask.shape == a.shape, op, a.shape, mask.shape)
    if not mask.any(axis=1).all():
        raise ValueError(f"{op}: every mask row needs at least one kept entry")
    return mask


def _stable_lse(x: np.ndarray, mask: np.ndarray | None):
    xm = x if mask is None else np.where(mask, x, -np.inf)
    top = xm.max(axis=1, keepdims=True)
    with np.errstate(under="ignore"):
        w = np.exp(xm - top)
    tot = w.sum(axis=1, keepdims=True)
    return (top + np.log(tot))[:, 0], w / tot


def logsumexp_rows(a: Tensor, mask=None) -> Tensor:
    _check(a.value.ndim == 2, "logsumexp_rows", a.shape)
    mask = _mask_for(a, mask, "logsumexp_rows")
    out, soft = _stable_lse(a.value, mask)
    return _emit("logsumexp_rows", out, (a,), lambda g: (g[:, None] * soft,))


def log_softmax_rows(a: Tensor, mask=None) -> Tensor:
    _check(a.value.ndim == 2, "log_softmax_rows", a.shape)
    mask = _mask_for(a, mask, "log_softmax_rows")
    lse, soft = _stable_lse(a.value, mask)
    out = a.value - lse[:, None]
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def rule(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_rows", out, (a,), rule)


def logsumexp_with_prior(logits, log_priors) -> float:
    """``log sum_m exp(logits[m] + log_priors[m])`` evaluated without overflow."""
    s = np.asarray(logits, dtype=np.float64) + np.asarray(log_priors, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("logsumexp_with_prior needs non-empty 1-D vectors of equal length")
    top = s.max()
    return float(top + np.log(np.exp(s - top).sum()))
