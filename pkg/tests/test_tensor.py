import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from come import tensor as T
from come.gradcheck import check


def _shape(rng, lo=1, hi=4):
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def _matmul(rng):
    n, k = _shape(rng)
    m = int(rng.integers(1, 5))
    return (lambda t: T.matmul(t[0], t[1])), [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _binary(op):
    def make(rng):
        s = _shape(rng)
        return (lambda t: op(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]
    return make


def _unary(op, positive=False, kink=False):
    def make(rng):
        a = rng.normal(size=_shape(rng))
        if positive:
            a = np.abs(a) + 0.5
        if kink:  # keep finite differences away from the relu kink
            a = np.where(np.abs(a) < 0.05, 0.3, a)
        return (lambda t: op(t[0])), [a]
    return make


def _add_rowvec(rng):
    n, m = _shape(rng)
    return (lambda t: T.add_rowvec(t[0], t[1])), [rng.normal(size=(n, m)), rng.normal(size=m)]


def _gather(rng):
    n, m = _shape(rng)
    idx = rng.integers(0, n, size=int(rng.integers(1, 6)))
    return (lambda t: T.gather_rows(t[0], idx)), [rng.normal(size=(n, m))]


def _take(rng):
    n, m = _shape(rng)
    idx = rng.integers(0, m, size=n)
    return (lambda t: T.take_along_rows(t[0], idx)), [rng.normal(size=(n, m))]


def _scatter(rng):
    r, m = _shape(rng)
    n = int(rng.integers(1, 4))
    seg = rng.integers(0, n, size=r)
    return (lambda t: T.scatter_mean(t[0], seg, n)), [rng.normal(size=(r, m))]


def _concat(rng):
    n, m = _shape(rng)
    axis = int(rng.integers(0, 2))
    other = (int(rng.integers(1, 4)), m) if axis == 0 else (n, int(rng.integers(1, 4)))
    return (lambda t: T.concat([t[0], t[1]], axis)), [rng.normal(size=(n, m)), rng.normal(size=other)]


def _weighted(op):
    """Reductions to a row vector are checked through a random weighting so the
    summed loss is not trivially constant (e.g. sum of log-softmax rows)."""
    def make(rng):
        s = _shape(rng)
        w = rng.normal(size=s)
        return (lambda t: T.sum(T.mul(op(t[0]), T.constant(w)))), [rng.normal(size=s)]
    return make


def _masked(op):
    def make(rng):
        n, m = _shape(rng, 1, 4)
        m = max(m, 2)
        mask = rng.random((n, m)) < 0.6
        mask[np.arange(n), rng.integers(0, m, size=n)] = True
        w = rng.normal(size=(n, m))
        if op is T.log_softmax_rows:
            return (lambda t: T.sum(T.mul(op(t[0], mask), T.constant(w)))), [rng.normal(size=(n, m))]
        return (lambda t: T.mul(op(t[0], mask), T.constant(w[:, 0]))), [rng.normal(size=(n, m))]
    return make


def _reshape(rng):
    n, m = _shape(rng)
    return (lambda t: T.reshape(t[0], (m, n))), [rng.normal(size=(n, m))]


OPS = {
    "matmul": _matmul,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "dot_rows": _binary(T.dot_rows),
    "scale": _unary(lambda a: T.scale(a, -1.7)),
    "relu": _unary(T.relu, kink=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "transpose": _unary(T.transpose),
    "reshape": _reshape,
    "add_rowvec": _add_rowvec,
    "gather_rows": _gather,
    "take_along_rows": _take,
    "scatter_mean": _scatter,
    "concat": _concat,
    "l2_normalize_rows": _weighted(T.l2_normalize_rows),
    "sum_rows": _unary(lambda a: T.dot_rows(T.reshape(T.sum_rows(a), (a.shape[0], 1)),
                                          T.reshape(T.sum_rows(T.exp(a)), (a.shape[0], 1)))),
    "mean": _unary(T.mean),
    "logsumexp_rows": _unary(T.logsumexp_rows),
    "log_softmax_rows": _weighted(T.log_softmax_rows),
    "masked_logsumexp": _masked(T.logsumexp_rows),
    "masked_log_softmax": _masked(T.log_softmax_rows),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check(*OPS[name](rng)) for _ in range(100))
    assert worst < 1e-4


def test_square_gradient():
    x = T.Tensor(3.0, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_matmul_sum_gradient():
    rng = np.random.default_rng(0)
    assert check(lambda t: T.sum(T.matmul(t[0], t[1])),
                 [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]) < 1e-4


def test_log_softmax_gradient_sums_to_zero_and_matches_simplex():
    # d/do of -log p_y is softmax(o) - onehot(y); the softmax part sums to 1
    rng = np.random.default_rng(1)
    o = T.Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum(T.logsumexp_rows(o)))
    assert o.grad.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(o.grad > 0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)),
       arrays(np.float64, 8, elements=st.floats(0.5, 500)), st.integers(0, 7))
def test_logsumexp_with_prior_gives_balanced_nll(o, counts, j):
    M = len(o)
    logN = np.log(counts[:M])
    j = j % M
    lhs = T.logsumexp_with_prior(o, logN) - logN[j] - o[j]
    s = o + logN
    p = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    assert lhs == pytest.approx(-np.log(p[j]), abs=1e-12, rel=1e-12)


def test_logsumexp_with_prior_rejects_empty():
    with pytest.raises(ValueError):
        T.logsumexp_with_prior([], [])


def test_backward_is_linear():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 4))
    W = rng.normal(size=(4, 2))
    a, b = 0.7, -2.3

    def grads(fa, fb):
        x = T.Tensor(A, requires_grad=True)
        with T.Tape() as tape:
            h = T.matmul(x, T.constant(W))
            tape.backward(T.scale(T.sum(T.exp(h)), fa) + T.scale(T.sum(T.logsumexp_rows(h)), fb))
        return x.grad

    combined = grads(a, b)
    assert np.allclose(combined, a * grads(1, 0) + b * grads(0, 1), atol=1e-10, rtol=0)


def test_backward_twice_raises():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
        tape.backward(loss)
        with pytest.raises(T.TapeError):
            tape.backward(loss)


def test_non_scalar_loss_raises():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        with pytest.raises(T.TapeError):
            tape.backward(T.exp(x))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))


def test_nan_fails_fast():
    with pytest.raises(T.NumericalError, match="log"):
        T.log(T.constant(np.array([-1.0])))


def test_zero_row_normalizes_to_zero_and_counts():
    before = T.zero_norm_count
    out = T.l2_normalize_rows(T.constant(np.array([[0.0, 0.0], [3.0, 4.0]])))
    assert np.array_equal(out.value, [[0.0, 0.0], [0.6, 0.8]])
    assert T.zero_norm_count == before + 1


def test_ops_outside_tape_record_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.exp(x)
    with T.Tape() as tape:
        T.exp(T.constant(np.ones(3)))
    assert len(tape) == 0 and x.grad is None and not getattr(y, "_recorded", False)


def test_masked_entries_get_no_gradient():
    x = T.Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    mask = np.array([[True, False, True]])
    with T.Tape() as tape:
        out = T.log_softmax_rows(x, mask)
        tape.backward(T.sum(T.mul(out, T.constant(np.array([[1.0, 5.0, -2.0]])))))
    assert out.value[0, 1] == 0.0
    assert x.grad[0, 1] == 0.0
