import json
import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from cganet.metrics import (aggregate_cases, case_scores, confidence_histogram, cross_val_aggregate, dice,
                            hausdorff, region_dice, region_mask, surface, write_report)


def surface_oracle(mask):
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis, step in product(range(mask.ndim), (-1, 1)):
            nb = list(idx)
            nb[axis] += step
            if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                out[idx] = True
                break
    return out


def hausdorff_oracle(a, b, percentile):
    pa, pb = np.argwhere(surface_oracle(a)), np.argwhere(surface_oracle(b))
    dists = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(dists.min(axis=1), percentile), np.percentile(dists.min(axis=0), percentile))


def test_region_composition():
    labels = np.array([0, 1, 2, 4])
    assert region_mask(labels, "ET").tolist() == [False, False, False, True]
    assert region_mask(labels, "WT").tolist() == [False, True, True, True]
    assert region_mask(labels, "TC").tolist() == [False, True, False, True]


def test_dice_examples():
    gt = np.random.default_rng(0).choice([0, 1, 2, 4], size=(6, 6, 6))
    for r in ("ET", "WT", "TC"):
        assert region_dice(gt, gt, r) == 1.0
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[:2], b[2:] = True, True
    assert dice(a, b) == 0.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    c = np.zeros((4, 4, 4), bool)
    d = np.zeros_like(c)
    c[:2, :2, :2] = True
    d[1:3, :2, :2] = True  # equal cubes shifted by half their depth
    assert dice(c, d) == pytest.approx(2 * 4 / 16)


def test_half_overlap_two_to_one():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[:2, :2, :2] = True
    b[:2, :2, :1] = True  # b inside a with half its volume
    assert dice(a, b) == pytest.approx(2 / 3)


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (4, 4, 4)), arrays(bool, (4, 4, 4)))
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert 0.0 <= d <= 1.0 and d == dice(b, a)


def test_surface_matches_oracle():
    m = np.random.default_rng(1).random((6, 6, 6)) < 0.6
    assert np.array_equal(surface(m), surface_oracle(m))


def test_hausdorff_simple_cases():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hausdorff(a, b, 95) == 3.0 and hausdorff(a, b, 100) == 3.0
    assert hausdorff(a, a, 95) == 0.0
    assert hausdorff(a, np.zeros_like(a)) == math.inf
    assert hausdorff(a, b, 100, spacing=(2.0, 1.0, 1.0)) == 6.0


@pytest.mark.parametrize("seed", range(6))
def test_hausdorff_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 8)) < 0.3
    b = rng.random((6, 7, 8)) < 0.2
    b = np.pad(b, ((0, 2), (0, 1), (0, 0)))
    for pct in (95, 100):
        assert hausdorff(a, b, pct) == hausdorff_oracle(a, b, pct)
        assert hausdorff(a, b, pct) == hausdorff(b, a, pct)
    assert hausdorff(a, b, 100) >= hausdorff(a, b, 95)


def test_hausdorff_triangle_inequality_spot_check():
    rng = np.random.default_rng(7)
    masks = [rng.random((8, 8, 8)) < 0.1 for _ in range(3)]
    ab, bc, ac = (hausdorff(x, y, 100) for x, y in [(masks[0], masks[1]), (masks[1], masks[2]),
                                                    (masks[0], masks[2])])
    # the surface-based distance is a Hausdorff distance on surface point sets
    sa, sb, sc = (hausdorff(surface(m), surface(m), 100) for m in masks)
    assert sa == sb == sc == 0.0
    assert ac <= ab + bc + 1e-12


def test_confidence_histogram():
    assert confidence_histogram(np.ones(10)).tolist() == [0, 0, 0, 1]
    assert confidence_histogram(np.full(7, 0.5)).tolist() == [0, 0, 1, 0]
    p = np.random.default_rng(8).random(1000)
    h = confidence_histogram(p)
    direct = [np.sum(p < 0.1), np.sum((p >= 0.1) & (p < 0.5)), np.sum((p >= 0.5) & (p < 0.9)), np.sum(p >= 0.9)]
    assert h.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(h, np.array(direct) / 1000)
    with pytest.raises(ValueError):
        confidence_histogram(np.array([0.5, 1.2]))
    with pytest.raises(ValueError):
        confidence_histogram(np.array([-0.1]))


def test_cross_val_aggregate():
    assert cross_val_aggregate([{"d": 0.0}, {"d": 2.0}])["d"] == {"mean": 1.0, "std": 1.0}
    same = cross_val_aggregate([{"d": 0.7}] * 3)
    assert same["d"]["std"] == 0.0
    vals = np.random.default_rng(9).random(5)
    agg = cross_val_aggregate([{"d": float(v)} for v in vals])
    mean = sum(vals) / 5
    var = sum((v - mean) ** 2 for v in vals) / 5
    assert agg["d"]["mean"] == pytest.approx(mean, abs=1e-12)
    assert agg["d"]["std"] == pytest.approx(math.sqrt(var), abs=1e-12)
    with pytest.raises(ValueError):
        cross_val_aggregate([{"d": 1.0}])
    with pytest.raises(ValueError):
        cross_val_aggregate([{"d": 1.0}, {"e": 1.0}])


def test_case_scores_and_aggregation(tmp_path):
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:6, 2:6, 2:6] = 2
    gt[3:5, 3:5, 3:5] = 4
    pred = gt.copy()
    pred[pred == 4] = 1
    s = case_scores(pred, gt)
    assert s["dice_WT"] == 1.0 and s["dice_TC"] == 1.0 and s["dice_ET"] == 0.0
    assert s["hd95_ET"] == math.inf
    agg = aggregate_cases([s, case_scores(gt, gt)])
    assert agg["hd95_ET"] == 0.0 and agg["hd95_ET_failures"] == 1.0
    path = tmp_path / "report.json"
    write_report(path, {"a": s}, agg, confidence_histogram(np.linspace(0, 1, 11)))
    doc = json.loads(path.read_text())
    assert doc["cases"]["a"]["hd95_ET"] == "inf"
    assert sum(doc["confidence_bins"].values()) == pytest.approx(1.0)
