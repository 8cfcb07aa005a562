"""Supervised attention module: class-guided maps, prototypes and their losses.

Shapes follow the batched volumetric layout. A feature map ``X`` is
``(N, C, h, w, d)``, an attention map ``S`` is ``(N, K, h, w, d)`` with one
channel per class, and prototypes are stored column-wise as ``(N, C, K)``.
Unbatched inputs (no leading ``N``) are accepted by the public helpers.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import functional as F
from .autodiff import Variable
from .tensor import ShapeError

CLASS_LABELS: tuple[int, ...] = (0, 1, 2, 4)
LABEL_TO_CHANNEL = {label: ch for ch, label in enumerate(CLASS_LABELS)}


class LabelError(ValueError):
    """Raised for label values outside the {0, 1, 2, 4} alphabet."""


@dataclass
class SAMConfig:
    """Switches for the attention path and what it feeds."""

    enabled: bool = True
    intra: bool = True
    intra_classes: tuple[int, ...] | None = None  # channel indices; None means all
    inter: bool = True
    inter_sign: str = "maximize"
    inter_ordered_pairs: bool = False
    residual: bool = True
    attention_softmax: bool = True
    hard_masks: bool = False
    # The inter-class loss sees the masks as constants, so it can only move
    # features apart and cannot pull the attention map off its supervision.
    inter_detach_masks: bool = True


def labels_to_channels(labels: np.ndarray) -> np.ndarray:
    """Map label values {0,1,2,4} to channel indices {0,1,2,3}."""
    labels = np.asarray(labels)
    lut = np.full(max(CLASS_LABELS) + 1, -1, dtype=np.int64)
    for label, ch in LABEL_TO_CHANNEL.items():
        lut[label] = ch
    bad = (labels < 0) | (labels > max(CLASS_LABELS))
    if not bad.any():
        ch = lut[labels]
        bad = ch < 0
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelError(f"unknown label value {labels[where]} at voxel {where}")
    return ch


def channels_to_labels(channels: np.ndarray) -> np.ndarray:
    return np.asarray(CLASS_LABELS, dtype=np.uint8)[np.asarray(channels)]


def onehot(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """One-hot encode on a new channel axis placed before the spatial axes.

    ``(D, H, W)`` becomes ``(4, D, H, W)``; ``(N, D, H, W)`` becomes
    ``(N, 4, D, H, W)``.
    """
    ch = labels_to_channels(labels)
    eye = np.eye(len(CLASS_LABELS), dtype=dtype)
    out = eye[ch]  # (..., K)
    return np.moveaxis(out, -1, -4 if ch.ndim == 4 else 0)


def downsample_labels(gt: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsampling that keeps the first voxel of each block."""
    gt = np.asarray(gt)
    spatial = gt.shape[-3:]
    if any(s % factor for s in spatial):
        raise ShapeError(f"label extents {spatial} not divisible by {factor}")
    return gt[..., ::factor, ::factor, ::factor]


def make_category_guided_map(gt: np.ndarray, factor: int, dtype=np.float32) -> np.ndarray:
    """Downsample the ground truth by ``factor`` and one-hot encode it."""
    labels_to_channels(gt)  # reject bad labels even where the sampling grid skips them
    return onehot(downsample_labels(gt, factor), dtype)


def attention_supervision_loss(S, G) -> Variable:
    """Mean squared error between the attention map and the guided map."""
    S = S if isinstance(S, Variable) else Variable(S)
    G = G if isinstance(G, Variable) else Variable(G)
    if S.shape != G.shape:
        raise ShapeError(f"attention loss: map shape {S.shape} vs target shape {G.shape}")
    return F.mean(F.square(F.sub(S, G)))


def _batched(x: Variable, ndim: int) -> tuple[Variable, bool]:
    if x.value.ndim == ndim - 1:
        return F.reshape(x, (1,) + x.shape), True
    return x, False


def class_prototypes(X, S) -> tuple[Variable, np.ndarray]:
    """Masked average pooling of ``X`` under every class mask of ``S``.

    Returns prototypes ``(N, C, K)`` and a boolean presence array ``(N, K)``.
    A class whose weights sum to zero gets a zero prototype and is marked
    absent.
    """
    X = X if isinstance(X, Variable) else Variable(X)
    S = S if isinstance(S, Variable) else Variable(S)
    if X.shape[0] != S.shape[0] or X.shape[2:] != S.shape[2:]:
        raise ShapeError(f"prototypes: feature map {X.shape} and masks {S.shape} disagree")
    n, c = X.shape[:2]
    k = S.shape[1]
    v = int(np.prod(X.shape[2:]))
    xf = F.reshape(X, (n, c, v))
    mf = F.reshape(S, (n, k, v))
    num = F.matmul(xf, F.permute(mf, (0, 2, 1)))  # (N, C, K)
    den = F.sum(mf, axes=2, keepdims=True)  # (N, K, 1)
    present = den.value[:, :, 0] > 0
    den = F.add(den, (~present[:, :, None]).astype(den.dtype))
    den = F.broadcast_to(F.permute(den, (0, 2, 1)), (n, c, k))
    return F.div(num, den), present


def masked_average_pool(X, mask) -> tuple[Variable, bool]:
    """Weighted mean feature vector of ``X`` (C, h, w, d) under ``mask`` (h, w, d)."""
    X = X if isinstance(X, Variable) else Variable(X)
    mask = mask if isinstance(mask, Variable) else Variable(mask)
    if X.shape[1:] != mask.shape:
        raise ShapeError(f"masked pool: features {X.shape} vs mask {mask.shape}")
    p, present = class_prototypes(F.reshape(X, (1,) + X.shape), F.reshape(mask, (1, 1) + mask.shape))
    return F.reshape(p, (X.shape[0],)), bool(present[0, 0])


def hard_masks(S: np.ndarray) -> np.ndarray:
    """One-hot of the per-voxel argmax over classes."""
    S = np.asarray(S)
    idx = np.argmax(S, axis=1)
    return np.moveaxis(np.eye(S.shape[1], dtype=S.dtype)[idx], -1, 1)


def intra_class_update(X, S, classes: Sequence[int] | None = None) -> Variable:
    """Rebuild ``X`` from class prototypes weighted by the class masks.

    ``Y(i) = sum_k p_k * M_k(i)`` over the reconstructed ``classes``; voxel
    mass belonging to the other classes passes ``X`` through. With every
    class listed this is the plain prototype reconstruction. The residual
    connection is left to the caller.
    """
    X = X if isinstance(X, Variable) else Variable(X)
    S = S if isinstance(S, Variable) else Variable(S)
    X, unbatched = _batched(X, 5)
    S, _ = _batched(S, 5)
    n, c = X.shape[:2]
    k = S.shape[1]
    if X.shape[0] != S.shape[0] or X.shape[2:] != S.shape[2:]:
        raise ShapeError(f"intra-class update: feature map {X.shape} and masks {S.shape} disagree")
    all_classes = tuple(range(k))
    classes = all_classes if classes is None else tuple(sorted(set(int(i) for i in classes)))
    if any(i < 0 or i >= k for i in classes):
        raise ShapeError(f"intra-class update: classes {classes} outside 0..{k - 1}")
    if not classes:
        warnings.warn("intra-class update with an empty class set leaves the features unchanged")
        return F.reshape(X, X.shape[1:]) if unbatched else X
    v = int(np.prod(X.shape[2:]))
    protos, _ = class_prototypes(X, S)
    mf = F.reshape(S, (n, k, v))
    if classes == all_classes:
        y = F.matmul(protos, mf)
    else:
        sel = list(classes)
        rest = [i for i in all_classes if i not in classes]
        y = F.matmul(F.take(protos, sel, axis=2), F.take(mf, sel, axis=1))
        pass_mass = F.sum(F.take(mf, rest, axis=1), axes=1, keepdims=True)  # (N, 1, V)
        xf = F.reshape(X, (n, c, v))
        y = F.add(y, F.mul(xf, F.broadcast_to(pass_mass, (n, c, v))))
    y = F.reshape(y, X.shape)
    return F.reshape(y, X.shape[1:]) if unbatched else y


def inter_class_distance(protos, present: np.ndarray | None = None, ordered_pairs: bool = False) -> Variable:
    """Sum of Euclidean distances over unordered pairs of present prototypes.

    ``protos`` is ``(N, C, K)`` (or ``(C, K)``); the result has shape ``(N,)``
    (or ``()``). ``ordered_pairs`` counts each pair twice.
    """
    protos = protos if isinstance(protos, Variable) else Variable(protos)
    unbatched = protos.value.ndim == 2
    if unbatched:
        protos = F.reshape(protos, (1,) + protos.shape)
    n, c, k = protos.shape
    present = np.ones((n, k), bool) if present is None else np.asarray(present, bool).reshape(n, k)
    if (present.sum(axis=1) < 2).any():
        warnings.warn("fewer than two present prototypes; their inter-class distance is 0")
    pairs = list(itertools.combinations(range(k), 2))
    if not pairs:
        d = Variable(np.zeros(n, protos.dtype))
        return F.reshape(d, ()) if unbatched else d
    left = F.take(protos, [i for i, _ in pairs], axis=2)
    right = F.take(protos, [j for _, j in pairs], axis=2)
    dist = F.norm(F.sub(left, right), axis=1)  # (N, P)
    weight = np.stack([present[:, i] & present[:, j] for i, j in pairs], axis=1).astype(protos.dtype)
    d = F.sum(F.mul(dist, weight), axes=1)
    if ordered_pairs:
        d = F.scale(d, 2.0)
    return F.reshape(d, ()) if unbatched else d


def inter_class_loss(D, sign: str = "maximize") -> Variable:
    """``log(1 / (1 + D))`` averaged over the batch; ``minimize`` flips the sign."""
    D = D if isinstance(D, Variable) else Variable(np.asarray(D, dtype=np.float64))
    if np.any(D.value < 0):
        raise ValueError("inter-class distance must be non-negative")
    l1p = F.log(F.add_scalar(D, 1.0))
    if sign == "maximize":
        loss = F.neg(l1p)
    elif sign == "minimize":
        loss = l1p
    else:
        raise ValueError(f"inter sign must be 'maximize' or 'minimize', got {sign!r}")
    return F.mean(loss) if loss.value.ndim else loss


@dataclass
class SAMOutput:
    attention: Variable
    features_before: Variable
    features_after: Variable
    prototypes: Variable
    presence: np.ndarray
    distance: Variable | None = None
    extras: dict = field(default_factory=dict)


def apply_sam(X: Variable, S: Variable, cfg: SAMConfig) -> SAMOutput:
    """Run the bottleneck part of the module: prototypes, update and distance."""
    masks = Variable(hard_masks(S.value)) if cfg.hard_masks else S
    protos, present = class_prototypes(X, masks)
    out = X
    if cfg.intra:
        y = intra_class_update(X, masks, cfg.intra_classes)
        out = F.add(y, X) if cfg.residual else y
    dist = None
    if cfg.inter:
        if cfg.inter_detach_masks:
            protos_d, present = class_prototypes(X, Variable(masks.value))
        else:
            protos_d = protos
        dist = inter_class_distance(protos_d, present, cfg.inter_ordered_pairs)
    return SAMOutput(S, X, out, protos, present, dist)
