import numpy as np
import pytest

from cganet import functional as F
from cganet.conv import conv3d_backward_input, conv3d_forward, conv_transpose3d_forward
from cganet.tensor import ShapeError, count_ops

from gradcheck import max_rel_error


def conv_oracle(x, w, stride, pad):
    """Seven nested loops over batch, output channel, output voxel, input channel and kernel offsets."""
    n, c, d, h, wd = x.shape
    co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = ((s + 2 * pad - k) // stride + 1 for s in (d, h, wd))
    out = np.zeros((n, co, od, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0
                        for ci in range(c):
                            for a in range(k):
                                for bb in range(k):
                                    for cc in range(k):
                                        acc += w[o, ci, a, bb, cc] * xp[b, ci, i * stride + a, j * stride + bb,
                                                                        l * stride + cc]
                        out[b, o, i, j, l] = acc
    return out


def test_identity_embedding_1x1():
    x = np.random.default_rng(0).standard_normal((1, 3, 2, 3, 4))
    w = np.eye(3).reshape(3, 3, 1, 1, 1)
    assert np.array_equal(conv3d_forward(x, w), x)


def test_neighbourhood_counting():
    out = conv3d_forward(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), 1, 1)
    assert out[0, 0, 1, 1, 1] == 27
    assert out[0, 0, 0, 0, 0] == 8
    assert out[0, 0, 0, 1, 1] == 18


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 4), (2, 1, 5), (1, 0, 4), (2, 0, 6)])
def test_matches_nested_loop_oracle(stride, pad, size):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, size, size - 1, size))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    np.testing.assert_allclose(conv3d_forward(x, w, stride, pad), conv_oracle(x, w, stride, pad), atol=1e-5)


def test_channel_mismatch_and_small_input():
    with pytest.raises(ShapeError, match="channels"):
        conv3d_forward(np.ones((1, 2, 4, 4, 4)), np.ones((1, 3, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv3d_forward(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)))


def test_transpose_doubles_extent():
    x = np.random.default_rng(1).standard_normal((1, 4, 16, 16, 16)).astype(np.float32)
    w = np.random.default_rng(2).standard_normal((4, 2, 2, 2, 2)).astype(np.float32)
    assert conv_transpose3d_forward(x, w).shape == (1, 2, 32, 32, 32)
    assert not conv_transpose3d_forward(np.zeros_like(x), w).any()


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1)])
def test_adjoint_identity(k, stride, pad):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 6, 6, 6))
    w = rng.standard_normal((4, 3, k, k, k))
    y_shape = conv3d_forward(x, w, stride, pad).shape
    y = rng.standard_normal(y_shape)
    lhs = np.vdot(conv3d_forward(x, w, stride, pad), y)
    rhs = np.vdot(x, conv3d_backward_input(y, w, x.shape[2:], stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    if k == 2:
        # a transposed conv with weight (4, 3, ...) maps 4 channels back to 3
        rhs_t = np.vdot(x, conv_transpose3d_forward(y, w, stride, pad))
        assert lhs == pytest.approx(rhs_t, rel=1e-10)


def test_op_counter_matches_formula():
    x = np.ones((2, 3, 4, 4, 4))
    w = np.ones((5, 3, 3, 3, 3))
    with count_ops() as c:
        out = conv3d_forward(x, w, 2, 1)
    assert out.shape == (2, 5, 2, 2, 2)
    assert c.conv == 2 * 3 * 27 * 8 * 5


def test_conv_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    assert max_rel_error(lambda xv, wv, bv: F.conv3d(xv, wv, bv, 1, 1), [x, w, b]) <= 1e-5
    assert max_rel_error(lambda xv, wv: F.conv3d(xv, wv, None, 2, 1), [x, w]) <= 1e-5


def test_conv_transpose_gradients():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 3, 2, 2, 2))
    w = rng.standard_normal((3, 2, 2, 2, 2))
    b = rng.standard_normal(2)
    assert max_rel_error(lambda xv, wv, bv: F.conv_transpose3d(xv, wv, bv, 2), [x, w, b]) <= 1e-5
