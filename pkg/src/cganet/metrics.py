"""Evaluation metrics: region Dice, Hausdorff distance, confidence bins, fold aggregation."""
from __future__ import annotations

import json
import math
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

# Region composition by label value.
REGIONS: dict[str, tuple[int, ...]] = {
    "ET": (4,),
    "WT": (1, 2, 4),
    "TC": (1, 4),
}
CONFIDENCE_EDGES = (0.0, 0.1, 0.5, 0.9, 1.0)


def region_mask(labels: np.ndarray, region: str | Sequence[int]) -> np.ndarray:
    members = REGIONS[region] if isinstance(region, str) else tuple(region)
    return np.isin(np.asarray(labels), members)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Binary Dice; two empty masks score 1.0."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def region_dice(pred_labels: np.ndarray, gt_labels: np.ndarray, region: str | Sequence[int]) -> float:
    return dice(region_mask(pred_labels, region), region_mask(gt_labels, region))


def surface(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels: in the mask with a 6-neighbour outside it (or outside the volume)."""
    mask = np.asarray(mask, bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def hausdorff(pred: np.ndarray, gt: np.ndarray, percentile: float = 95.0, spacing=(1.0, 1.0, 1.0),
              use_surface: bool = True) -> float:
    """Symmetric percentile Hausdorff distance between two binary masks.

    The percentile is taken on each directed set of nearest-neighbour
    distances, and the larger of the two is returned. Returns ``inf`` when
    either mask is empty.
    """
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if not pred.any() or not gt.any():
        return math.inf
    a = surface(pred) if use_surface else pred
    b = surface(gt) if use_surface else gt
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(a) * sp
    pb = np.argwhere(b) * sp
    d_ab = np.percentile(_directed(pa, pb), percentile)
    d_ba = np.percentile(_directed(pb, pa), percentile)
    return float(max(d_ab, d_ba))


def confidence_histogram(probs: np.ndarray) -> np.ndarray:
    """Proportions of values in [0, .1), [.1, .5), [.5, .9), [.9, 1]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("confidence histogram of an empty tensor")
    if (p < 0).any() or (p > 1).any() or np.isnan(p).any():
        raise ValueError("probabilities must lie in [0, 1]")
    idx = np.searchsorted(np.asarray(CONFIDENCE_EDGES[1:-1]), p, side="right")
    counts = np.bincount(idx, minlength=4)
    return counts / p.size


def case_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> dict[str, float]:
    """Dice and 95%/100% Hausdorff per region plus per-class foreground Dice."""
    out: dict[str, float] = {}
    for region in REGIONS:
        p = region_mask(pred_labels, region)
        g = region_mask(gt_labels, region)
        out[f"dice_{region}"] = dice(p, g)
        out[f"hd95_{region}"] = hausdorff(p, g, 95.0, spacing)
        out[f"hd100_{region}"] = hausdorff(p, g, 100.0, spacing)
    for label in (1, 2, 4):
        out[f"dice_class{label}"] = dice(np.asarray(pred_labels) == label, np.asarray(gt_labels) == label)
    out["dice_fg_mean"] = float(np.mean([out[f"dice_class{l}"] for l in (1, 2, 4)]))
    return out


def aggregate_cases(cases: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Mean over cases; infinite Hausdorff values are excluded and counted as failures."""
    if not cases:
        return {}
    out: dict[str, float] = {}
    for key in cases[0]:
        vals = np.asarray([c[key] for c in cases], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        out[key] = float(finite.mean()) if finite.size else math.inf
        if finite.size != vals.size:
            out[f"{key}_failures"] = float(vals.size - finite.size)
    return out


def cross_val_aggregate(folds: Sequence[Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and population standard deviation (divisor n) of each metric across folds."""
    if len(folds) < 2:
        raise ValueError("cross-validation aggregation needs at least two folds")
    keys = list(folds[0])
    for i, f in enumerate(folds):
        if list(f) != keys:
            raise ValueError(f"fold {i} reports metrics {sorted(f)}, expected {sorted(keys)}")
    out: dict[str, dict[str, float]] = {}
    for key in keys:
        vals = np.asarray([f[key] for f in folds], dtype=np.float64)
        # identical folds get an exact zero rather than rounding noise
        std = 0.0 if np.ptp(vals) == 0 else float(vals.std(ddof=0))
        out[key] = {"mean": float(vals.mean()), "std": std}
    return out


def format_report(scores: Mapping[str, float], title: str = "metrics") -> str:
    lines = [f"# {title}"]
    for key in sorted(scores):
        lines.append(f"{key:>24s}  {scores[key]:.6g}")
    return "\n".join(lines)


def write_report(path, per_case: Mapping[str, Mapping[str, float]], aggregate: Mapping[str, float],
                 histogram: Sequence[float] | None = None) -> None:
    """Machine-readable key-value report (JSON) with per-case and aggregate scores."""
    payload = {"cases": per_case, "aggregate": aggregate}
    if histogram is not None:
        payload["confidence_bins"] = {
            f"[{lo},{hi}{']' if hi == 1.0 else ')'}": float(v)
            for (lo, hi), v in zip(zip(CONFIDENCE_EDGES[:-1], CONFIDENCE_EDGES[1:]), histogram)
        }
    with open(path, "w") as fh:
        json.dump(json_safe(payload), fh, indent=2, sort_keys=True, allow_nan=False)


def json_safe(obj):
    """Replace non-finite floats by the strings "inf", "-inf", "nan" so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
