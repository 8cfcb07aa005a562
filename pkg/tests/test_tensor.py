import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cganet import tensor as T
from cganet.tensor import NumericError, ShapeError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_elementwise_basics():
    assert T.elementwise("add", [1.0, 2.0], [3.0, 4.0]).tolist() == [4.0, 6.0]
    assert T.elementwise("relu", [-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]
    assert T.elementwise("neg", [1.0]).tolist() == [-1.0]
    np.testing.assert_allclose(T.elementwise("log", T.elementwise("exp", [0.5, 1.5])), [0.5, 1.5])


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.elementwise("mul", np.ones((2, 3)), np.ones((3, 2)))


def test_unknown_op_and_arity():
    with pytest.raises(ValueError):
        T.elementwise("pow", [1.0], [2.0])
    with pytest.raises(TypeError):
        T.elementwise("add", [1.0])
    with pytest.raises(TypeError):
        T.elementwise("relu", [1.0], [1.0])


def test_division_modes():
    a, b = np.array([1.0, 2.0]), np.array([2.0, 0.0])
    assert T.division_mode() == "strict"
    with pytest.raises(NumericError):
        T.elementwise("div", a, b)
    T.set_division_mode("permissive")
    try:
        out = T.elementwise("div", a, b)
        assert out[0] == 0.5 and np.isinf(out[1])
    finally:
        T.set_division_mode("strict")
    with pytest.raises(ValueError):
        T.set_division_mode("sloppy")


def test_reduce():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert T.reduce("sum", a, axes={1}).tolist() == [3.0, 7.0]
    assert T.reduce("sum", a, axes=(1,), keepdims=True).shape == (2, 1)
    assert T.reduce("mean", np.full((3, 4, 5), 2.5)) == 2.5
    assert T.reduce("argmax", np.array([0.1, 0.7, 0.2]), axes=0) == 1
    assert T.reduce("max", a, axes=0).tolist() == [3.0, 4.0]


def test_reduce_errors():
    with pytest.raises(ShapeError):
        T.reduce("sum", np.zeros((0, 3)), axes=0)
    with pytest.raises((ShapeError, ValueError)):
        T.reduce("sum", np.zeros((2, 3)), axes=2)
    with pytest.raises(ValueError):
        T.reduce("median", np.zeros(3))


def test_reshape_permute_concat():
    a = np.arange(6.0).reshape(2, 3)
    r = T.reshape(a, (3, 2))
    assert r.ravel().tolist() == a.ravel().tolist()
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 4, 5))
    back = T.permute(T.permute(x, (0, 2, 3, 4, 1)), (0, 4, 1, 2, 3))
    assert np.array_equal(back, x)
    c = T.concat([np.ones((1, 2, 4, 4, 4)), np.zeros((1, 2, 4, 4, 4))], axis=1)
    assert c.shape == (1, 4, 4, 4, 4)
    with pytest.raises(ShapeError):
        T.reshape(a, (4, 2))
    with pytest.raises(ShapeError):
        T.permute(a, (0, 0))
    with pytest.raises(ShapeError):
        T.concat([np.ones((1, 2, 3)), np.ones((1, 2, 4))], axis=1)


def test_matmul_small_cases():
    A = np.random.default_rng(1).standard_normal((3, 3))
    assert np.array_equal(T.matmul(np.eye(3), A), A)
    assert T.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]]).tolist() == [[17.0], [39.0]]
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-12)
    a32 = rng.standard_normal((64, 64)).astype(np.float32)
    b32 = rng.standard_normal((64, 64)).astype(np.float32)
    ref = naive_matmul(a32.astype(np.float64), b32.astype(np.float64))
    err = np.abs(T.matmul(a32, b32) - ref).max() / np.abs(ref).max()
    assert err <= 1e-6


def test_matmul_batched_and_counted():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
    with T.count_ops() as c:
        out = T.matmul(a, b)
    assert out.shape == (2, 3, 5)
    assert c.matmul == 2 * 3 * 4 * 5 and c.total == c.matmul
    with pytest.raises(ShapeError):
        T.matmul(a, rng.standard_normal((3, 4, 5)))


def test_softmax():
    np.testing.assert_allclose(T.softmax(np.zeros(2), axis=0), [0.5, 0.5])
    big = T.softmax(np.array([1000.0, 0.0]), axis=0)
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    with pytest.raises(NumericError):
        T.softmax(np.array([np.nan, 1.0]), axis=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 4))
def test_softmax_rows_sum_to_one(values, rows):
    x = np.tile(np.asarray(values), (rows, 1))
    s = T.softmax(x, axis=1)
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_reshape_roundtrip_is_identity(a, b, c):
    x = np.arange(a * b * c, dtype=np.float64).reshape(a, b, c)
    assert np.array_equal(T.reshape(T.reshape(x, (c, a * b)), (a, b, c)), x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4), st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
def test_add_commutes(u, v):
    assert np.array_equal(T.elementwise("add", u, v), T.elementwise("add", v, u))
