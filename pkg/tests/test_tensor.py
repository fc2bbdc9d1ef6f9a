import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svis import tensor as T
from svis.tensor import Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_row_col():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\[2, 3\].*\[2, 3\]"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_silent_broadcasting():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))
    # bias over leading dims is the one allowed form
    assert T.add(Tensor(np.ones((3, 4))), Tensor(np.arange(4.0))).shape == (3, 4)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, atol=1e-15)
    big = T.softmax(Tensor([1000.0, 0.0]), 0).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0]), 0).data,
                               [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_bad_axis():
    with pytest.raises(T.ContractError):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)


def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = x.sum()
    np.testing.assert_array_equal(T.backward(tape, loss)[x], np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (x * x).sum()
    np.testing.assert_allclose(T.backward(tape, loss)[x], [2.0, 4.0, 6.0])


def test_backward_accumulates_fan_out():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * 3.0
        loss = (y + x + y).sum()  # residual-style reuse
    np.testing.assert_allclose(T.backward(tape, loss)[x], [7.0, 7.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(T.ContractError):
        T.backward(tape, y)


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        T.softmax(x @ x, 0).sum()
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_finite_diff_sum():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    assert T.finite_diff_check(lambda a: a.sum(), [x]) < 1e-9


def test_finite_diff_softmax_square():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 5)), requires_grad=True)
    assert T.finite_diff_check(lambda a: (T.softmax(a, 1) * T.softmax(a, 1)).sum(), [x]) < 1e-5


def test_finite_diff_catches_wrong_gradient():
    x = Tensor(np.random.default_rng(2).normal(size=4), requires_grad=True)

    def broken(a):
        return T._emit("broken", (a,), a.data ** 2, lambda g: (g * a.data,))  # missing factor 2

    assert T.finite_diff_check(lambda a: broken(a).sum(), [x]) > 0.1


def _rand(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


RESIZE_ROWS = np.random.default_rng(9).random((5, 3))
RESIZE_COLS = np.random.default_rng(8).random((4, 2))

PRIMITIVES = {
    "add_bias": (lambda a, b: (T.add(a, b) * T.add(a, b)).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: (T.sub(a, b) * T.sub(a, b)).sum(), [(3, 4), (3, 4)]),
    "mul_scale": (lambda a, b: (T.mul(a, b) * a).sum(), [(2, 3, 4), (4,)]),
    "div": (lambda a, b: T.div(a, T.exp(b)).sum(), [(3, 3), (3, 3)]),
    "matmul": (lambda a, b: (T.matmul(a, b) * T.matmul(a, b)).sum(), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: (T.matmul(a, b) * T.matmul(a, b)).sum(), [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda a: (T.transpose(a, (2, 0, 1)) * T.transpose(a, (2, 0, 1)) * 0.5).sum()
                  + T.transpose(a, (1, 2, 0))[0].sum(), [(2, 3, 4)]),
    "reshape_index": (lambda a: (a.reshape(6, 2)[1:4] * a.reshape(6, 2)[1:4]).sum(), [(3, 4)]),
    "fancy_index": (lambda a: (a[np.array([0, 2, 0]), np.array([1, 1, 1])] * 2.0).sum()
                    + (a[np.array([0, 2])] * a[np.array([0, 2])]).sum(), [(3, 4)]),
    "concat": (lambda a, b: (T.concat([a, b], 0) * T.concat([b, a], 0)).sum(), [(2, 3), (2, 3)]),
    "exp_log": (lambda a: T.log(T.exp(a) + 1.0).sum(), [(4,)]),
    "clamp_relu": (lambda a: (T.relu(a) * T.clamp_min(a, 0.1)).sum(), [(10,)]),
    "softmax_axis0": (lambda a: (T.softmax(a, 0) * a).sum(), [(3, 4)]),
    "mean": (lambda a: (a.mean(axis=1) * a.mean(axis=1)).sum(), [(3, 4)]),
    "layer_norm": (lambda x, g, b: (T.layer_norm(x, g, b) * x).sum(), [(3, 5), (5,), (5,)]),
    "im2col": (lambda x: (T.im2col(x, 3, 2, 1) * T.im2col(x, 3, 2, 1)).sum(), [(6, 6, 2)]),
    "resize": (lambda x: (T.resize(x, RESIZE_ROWS, RESIZE_COLS) * 1.5).sum()
               + (T.resize(x, np.eye(3), np.eye(2)) * x).sum(), [(3, 2, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    inputs = [_rand(s, i + 10) for i, s in enumerate(shapes)]
    assert T.finite_diff_check(fn, inputs) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)),
       st.integers(0, 1))
def test_softmax_is_simplex(x, axis):
    y = T.softmax(Tensor(x), axis).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    left = ((a @ b) @ c).data
    right = (a @ (b @ c)).data
    scale = max(1.0, np.abs(left).max())
    assert np.abs(left - right).max() / scale < 1e-9


def test_softmax_observer_sees_every_call():
    seen = []
    with T.observe_softmax(lambda y, axis: seen.append((y.shape, axis))):
        T.softmax(Tensor(np.ones((2, 3))), 0)
        T.softmax(Tensor(np.ones(4)), -1)
    T.softmax(Tensor(np.ones(4)), -1)
    assert seen == [((2, 3), 0), ((4,), -1)]
