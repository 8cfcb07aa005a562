"""Forward-only comparators: non-local self-attention and the context-prior layer.

Both operate on a single feature map ``X`` of shape ``(C, *spatial)`` with
2 or 3 spatial axes. Projections are 1x1(x1) convolutions, represented as
``(C_out, C_in)`` matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sam import downsample_labels, labels_to_channels
from .tensor import ShapeError

AFFINITY_MAX_N = 4096


@dataclass
class SelfAttentionConfig:
    channels: int
    proj_channels: int
    spatial: tuple[int, ...]

    @property
    def n_positions(self) -> int:
        return int(np.prod(self.spatial))


@dataclass
class SelfAttentionWeights:
    w_q: np.ndarray  # (C', C)
    w_k: np.ndarray  # (C', C)
    w_v: np.ndarray  # (C, C)

    @classmethod
    def random(cls, cfg: SelfAttentionConfig, rng: np.random.Generator, dtype=np.float64):
        c, cp = cfg.channels, cfg.proj_channels
        s = 1.0 / np.sqrt(c)
        return cls(
            (rng.standard_normal((cp, c)) * s).astype(dtype),
            (rng.standard_normal((cp, c)) * s).astype(dtype),
            (rng.standard_normal((c, c)) * s).astype(dtype),
        )


def _flatten(X: np.ndarray) -> np.ndarray:
    return T.reshape(X, (X.shape[0], int(np.prod(X.shape[1:]))))


def self_attention_forward(X: np.ndarray, weights: SelfAttentionWeights,
                           return_map: bool = False):
    """``Y = R(V S^T) + X`` with ``S = softmax_rows(Q^T K)``.

    Row ``i`` of ``S`` is the attention distribution of position ``i`` over
    all positions, so rows sum to one and ``y_i = sum_j S[i, j] v_j``.
    """
    X = np.asarray(X)
    c = X.shape[0]
    if weights.w_q.shape[1] != c or weights.w_k.shape[1] != c or weights.w_v.shape != (c, c):
        raise ShapeError(f"self-attention: weights do not fit a {c}-channel input")
    if weights.w_q.shape != weights.w_k.shape:
        raise ShapeError(f"self-attention: W_q {weights.w_q.shape} vs W_k {weights.w_k.shape}")
    xf = _flatten(X)
    Q = T.matmul(weights.w_q, xf)
    K = T.matmul(weights.w_k, xf)
    V = T.matmul(weights.w_v, xf)
    S = T.softmax(T.matmul(Q.T, K), axis=1)
    Y = T.elementwise("add", T.reshape(T.matmul(V, S.T), X.shape), X)
    return (Y, S) if return_map else Y


def affinity_map(gt: np.ndarray, factor: int = 1) -> np.ndarray:
    """Binary ``N x N`` map, 1 where two downsampled positions share a class."""
    small = downsample_labels(gt, factor) if factor > 1 else np.asarray(gt)
    n = small.size
    if n > AFFINITY_MAX_N:
        raise ValueError(f"affinity map over {n} positions exceeds the {AFFINITY_MAX_N} limit; "
                         f"use a smaller input or a larger downsampling factor")
    ch = labels_to_channels(small).reshape(-1)
    L = np.eye(4, dtype=np.float64)[ch]  # (N, C_l)
    return T.matmul(L, L.T)


@dataclass
class CPResult:
    y: np.ndarray
    prior: np.ndarray
    affinity: np.ndarray | None = None
    affinity_loss: float | None = None


def cp_layer_forward(X: np.ndarray, w_prior: np.ndarray, gt: np.ndarray | None = None,
                     factor: int = 1) -> CPResult:
    """Context-prior layer, single-multiplication reading.

    ``P = R(Conv1x1(X))`` has one output channel per position, giving an
    ``N x N`` map. Features are updated as ``Y = R(X_f P) + X``. When a
    ground truth is given, the affinity map and the binary cross-entropy of
    ``sigmoid(P)`` against it are reported as well.
    """
    X = np.asarray(X)
    c = X.shape[0]
    n = int(np.prod(X.shape[1:]))
    if w_prior.shape != (n, c):
        raise ShapeError(f"CP layer: prior conv weight must be {(n, c)}, got {w_prior.shape}")
    xf = _flatten(X)
    P = T.matmul(w_prior, xf)  # (N channels, N positions)
    Y = T.elementwise("add", T.reshape(T.matmul(xf, P), X.shape), X)
    res = CPResult(Y, P)
    if gt is not None:
        A = affinity_map(gt, factor)
        if A.shape != P.shape:
            raise ShapeError(f"CP layer: affinity {A.shape} vs prior {P.shape}")
        prob = 1.0 / (1.0 + np.exp(-P))
        eps = 1e-12
        res.affinity = A
        res.affinity_loss = float(-np.mean(A * np.log(prob + eps) + (1 - A) * np.log(1 - prob + eps)))
    return res
