import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cganet.autodiff import Tape, Variable, backward
from cganet.sam import (LabelError, SAMConfig, apply_sam, attention_supervision_loss, class_prototypes,
                        downsample_labels, hard_masks, inter_class_distance, inter_class_loss,
                        intra_class_update, make_category_guided_map, masked_average_pool, onehot)
from cganet.tensor import ShapeError

from gradcheck import max_rel_error


def random_hard_masks(rng, k, spatial, n=None):
    shape = spatial if n is None else (n,) + spatial
    idx = rng.integers(0, k, size=shape)
    return np.moveaxis(np.eye(k)[idx], -1, 0 if n is None else 1), idx


def softmax_masks(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- category guided map --------------------------------------------------------

def test_guided_map_all_background():
    G = make_category_guided_map(np.zeros((8, 8, 8), np.uint8), 2)
    assert G.shape == (4, 4, 4, 4)
    assert G[0].all() and not G[1:].any()


def test_guided_map_single_voxel():
    G = make_category_guided_map(np.full((2, 2, 2), 4, np.uint8), 2)
    assert G.shape == (4, 1, 1, 1)
    assert G[:, 0, 0, 0].tolist() == [0, 0, 0, 1]


def test_guided_map_argmax_matches_independent_downsample():
    rng = np.random.default_rng(0)
    gt = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=(2, 16, 16, 16))
    G = make_category_guided_map(gt, 4)
    assert G.shape == (2, 4, 4, 4, 4)
    ref = np.empty((2, 4, 4, 4), np.uint8)
    for b, i, j, l in itertools.product(range(2), range(4), range(4), range(4)):
        ref[b, i, j, l] = gt[b, 4 * i, 4 * j, 4 * l]
    assert np.array_equal(np.array([0, 1, 2, 4])[G.argmax(axis=1)], ref)
    assert np.array_equal(G.sum(axis=1), np.ones((2, 4, 4, 4)))


def test_guided_map_errors():
    bad = np.zeros((4, 4, 4), np.uint8)
    bad[1, 2, 3] = 3
    with pytest.raises(LabelError, match=r"\(1, 2, 3\)"):
        make_category_guided_map(bad, 2)
    with pytest.raises(ShapeError):
        downsample_labels(np.zeros((6, 6, 6)), 4)


# -- attention loss ---------------------------------------------------------------

def test_attention_loss_values():
    G = onehot(np.array([[[0, 1], [2, 4]], [[4, 4], [0, 0]]], np.uint8), np.float64)
    assert float(attention_supervision_loss(G, G).value) == 0.0
    S = np.full_like(G, 0.25)
    assert float(attention_supervision_loss(S, G).value) == pytest.approx(0.1875)
    with pytest.raises(ShapeError):
        attention_supervision_loss(S[:3], G)


def test_attention_loss_gradient():
    rng = np.random.default_rng(1)
    G = onehot(rng.choice([0, 1, 2, 4], size=(2, 3, 3, 3)), np.float64)
    S = softmax_masks(rng, G.shape)
    assert max_rel_error(lambda s: attention_supervision_loss(s, Variable(G)), [S]) <= 1e-5


# -- masked average pooling -------------------------------------------------------

def test_masked_pool_arithmetic_mean():
    X = np.zeros((2, 1, 1, 3))
    X[:, 0, 0, 0] = [1, 3]
    X[:, 0, 0, 1] = [3, 5]
    X[:, 0, 0, 2] = [100, 100]
    p, present = masked_average_pool(X, np.array([[[1.0, 1.0, 0.0]]]))
    assert p.value.tolist() == [2.0, 4.0] and present


def test_masked_pool_all_ones_is_global_average():
    X = np.random.default_rng(2).standard_normal((3, 2, 3, 4))
    p, _ = masked_average_pool(X, np.ones((2, 3, 4)))
    np.testing.assert_allclose(p.value, X.mean(axis=(1, 2, 3)))


def test_masked_pool_soft_mask_oracle():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 3, 3, 3))
    m = rng.uniform(0, 1, (3, 3, 3))
    ref = np.array([sum(X[c][i] * m[i] for i in np.ndindex(m.shape)) for c in range(5)]) / m.sum()
    p, _ = masked_average_pool(X, m)
    np.testing.assert_allclose(p.value, ref, atol=1e-6)


def test_masked_pool_empty_mask_is_absent_zero():
    p, present = masked_average_pool(np.ones((3, 2, 2, 2)), np.zeros((2, 2, 2)))
    assert not present and not p.value.any() and np.all(np.isfinite(p.value))


def test_masked_pool_gradient():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((3, 3, 3, 3))
    m = rng.uniform(0.1, 1, (3, 3, 3))
    assert max_rel_error(lambda x, w: masked_average_pool(x, w)[0], [X, m]) <= 1e-5


def test_prototypes_shape_and_presence():
    rng = np.random.default_rng(5)
    S, _ = random_hard_masks(rng, 4, (4, 4, 4), n=2)
    S[:, 2] = 0.0
    protos, present = class_prototypes(rng.standard_normal((2, 6, 4, 4, 4)), S)
    assert protos.shape == (2, 6, 4)
    assert present[:, 2].tolist() == [False, False]


# -- intra-class update -----------------------------------------------------------

def test_partition_property_and_idempotence():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 4, 4, 4))
    M, idx = random_hard_masks(rng, 4, (4, 4, 4))
    Y = intra_class_update(X, M).value
    for k in range(4):
        sel = idx == k
        if sel.any():
            expected = X[:, sel].mean(axis=1)
            np.testing.assert_allclose(Y[:, sel], np.repeat(expected[:, None], sel.sum(), axis=1), atol=1e-12)
    Y2 = intra_class_update(Y, M).value
    np.testing.assert_allclose(Y2, Y, atol=1e-6)


def test_single_class_gives_global_mean():
    X = np.random.default_rng(7).standard_normal((3, 2, 2, 2))
    M = np.zeros((4, 2, 2, 2))
    M[2] = 1.0
    Y = intra_class_update(X, M).value
    np.testing.assert_allclose(Y, np.broadcast_to(X.mean(axis=(1, 2, 3))[:, None, None, None], X.shape))


def test_subset_update_reductions():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((2, 3, 4, 4, 4))
    S = softmax_masks(rng, (2, 4, 4, 4, 4))
    full = intra_class_update(X, S).value
    np.testing.assert_allclose(intra_class_update(X, S, classes=[0, 1, 2, 3]).value, full, atol=1e-12)
    with pytest.warns(UserWarning):
        same = intra_class_update(X, S, classes=[]).value
    assert np.array_equal(same, X)
    with pytest.raises(ShapeError):
        intra_class_update(X, S, classes=[4])


def test_subset_single_class_voxel_oracle():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((3, 4, 4, 4))
    M, idx = random_hard_masks(rng, 4, (4, 4, 4))
    Y = intra_class_update(X, M, classes=[3]).value
    p3 = X[:, idx == 3].mean(axis=1)
    for pos in np.ndindex(idx.shape):
        want = p3 if idx[pos] == 3 else X[(slice(None),) + pos]
        np.testing.assert_allclose(Y[(slice(None),) + pos], want, atol=1e-12)


def test_channel_permutation_leaves_output_unchanged():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((2, 3, 4, 4, 4))
    S = softmax_masks(rng, (2, 4, 4, 4, 4))
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(intra_class_update(X, S[:, perm]).value, intra_class_update(X, S).value,
                               atol=1e-12)


def test_intra_update_shape_mismatch():
    with pytest.raises(ShapeError):
        intra_class_update(np.ones((1, 3, 4, 4, 4)), np.ones((1, 4, 2, 2, 2)))


def test_intra_update_gradients():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((1, 3, 2, 2, 2))
    S = softmax_masks(rng, (1, 4, 2, 2, 2))
    assert max_rel_error(lambda x, s: intra_class_update(x, s), [X, S]) <= 1e-5
    assert max_rel_error(lambda x, s: intra_class_update(x, s, classes=[1, 3]), [X, S]) <= 1e-5


# -- inter-class distance and loss ------------------------------------------------

def test_distance_examples():
    assert float(inter_class_distance(np.array([[0.0, 3.0], [0.0, 4.0]])).value) == pytest.approx(5.0)
    same = np.ones((3, 4))
    assert float(inter_class_distance(same).value) == 0.0


def test_distance_pair_loop_oracle_and_ordered_pairs():
    P = np.random.default_rng(12).standard_normal((6, 4))
    ref = sum(np.linalg.norm(P[:, i] - P[:, j]) for i in range(4) for j in range(i + 1, 4))
    assert float(inter_class_distance(P).value) == pytest.approx(ref, abs=1e-6)
    assert float(inter_class_distance(P, ordered_pairs=True).value) == pytest.approx(2 * ref, abs=1e-6)


def test_distance_skips_absent_classes():
    P = np.random.default_rng(13).standard_normal((3, 4))
    present = np.array([True, False, True, True])
    ref = sum(np.linalg.norm(P[:, i] - P[:, j]) for i, j in [(0, 2), (0, 3), (2, 3)])
    assert float(inter_class_distance(P, present).value) == pytest.approx(ref)
    with pytest.warns(UserWarning):
        d = inter_class_distance(P, np.array([True, False, False, False]))
    assert float(d.value) == 0.0


def test_distance_gradient_including_coincident_prototypes():
    P = np.random.default_rng(14).standard_normal((1, 3, 4))
    assert max_rel_error(lambda p: inter_class_distance(p), [P]) <= 1e-5
    Q = np.zeros((3, 2))
    q = Variable(Q, requires_grad=True)
    with Tape():
        d = inter_class_distance(q)
    backward(d)
    assert np.all(np.isfinite(q.grad))


def test_inter_loss_fixed_points_and_sign():
    assert float(inter_class_loss(0.0).value) == 0.0
    assert float(inter_class_loss(math.e - 1).value) == pytest.approx(-1.0, abs=1e-9)
    assert float(inter_class_loss(math.e - 1, "minimize").value) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        inter_class_loss(-1.0)
    with pytest.raises(ValueError):
        inter_class_loss(1.0, "sideways")


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e6), st.floats(1e-6, 1e3))
def test_inter_loss_monotone(lo, gap):
    hi = lo * (1 + gap) + gap
    assert float(inter_class_loss(lo).value) > float(inter_class_loss(hi).value)


def test_inter_loss_gradient():
    D = np.random.default_rng(15).uniform(0.1, 3.0, size=3)
    assert max_rel_error(lambda d: inter_class_loss(d), [D]) <= 1e-5
    assert max_rel_error(lambda d: inter_class_loss(d, "minimize"), [D]) <= 1e-5


def test_descent_on_inter_loss_pushes_prototypes_apart():
    p = Variable(np.random.default_rng(16).standard_normal((3, 4)) * 0.1, requires_grad=True)
    history = []
    for _ in range(50):
        p.zero_grad()
        with Tape():
            d = inter_class_distance(p)
            loss = inter_class_loss(d)
        history.append(float(d.value))
        backward(loss)
        p.value -= 0.1 * p.grad
    assert all(b > a for a, b in zip(history, history[1:]))


# -- apply_sam ------------------------------------------------------------------

def test_apply_sam_wiring():
    rng = np.random.default_rng(17)
    X = Variable(rng.standard_normal((2, 3, 2, 2, 2)))
    S = Variable(softmax_masks(rng, (2, 4, 2, 2, 2)))
    out = apply_sam(X, S, SAMConfig())
    expect = intra_class_update(X, S).value + X.value
    np.testing.assert_allclose(out.features_after.value, expect)
    assert out.distance.shape == (2,)
    plain = apply_sam(X, S, SAMConfig(residual=False, inter=False))
    np.testing.assert_allclose(plain.features_after.value, intra_class_update(X, S).value)
    assert plain.distance is None
    off = apply_sam(X, S, SAMConfig(intra=False))
    assert off.features_after is X
    hard = apply_sam(X, S, SAMConfig(hard_masks=True, residual=False))
    np.testing.assert_allclose(hard.features_after.value, intra_class_update(X, hard_masks(S.value)).value)


def test_inter_loss_masks_detached_by_default():
    rng = np.random.default_rng(18)
    X = Variable(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
    S = Variable(softmax_masks(rng, (1, 4, 2, 2, 2)), requires_grad=True)
    with Tape():
        loss = inter_class_loss(apply_sam(X, S, SAMConfig(intra=False)).distance)
    backward(loss)
    assert not S.grad.any() and X.grad.any()
    S.zero_grad()
    with Tape():
        loss = inter_class_loss(apply_sam(X, S, SAMConfig(intra=False, inter_detach_masks=False)).distance)
    backward(loss)
    assert S.grad.any()
