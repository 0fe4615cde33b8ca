"""Training losses with analytic gradients.

Each loss returns (value, gradient...) with gradients that match central
finite differences; they exist so the matching pipeline's objective is
executable and checkable without any training loop.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import ConfigError, DataError
from .geometry import nearest_neighbors

_CLIP = 1e-12


def focal_matching_loss(M: np.ndarray, gt_pairs, alpha: float = 0.25,
                        gamma: float = 2.0):
    """Focal binary cross-entropy over every confidence-matrix entry.

    Ground-truth pairs are the positive entries; everything else is
    negative.  The loss is the mean over all entries of
        -alpha (1-p)^gamma log p          at positives
        -(1-alpha) p^gamma log(1-p)       at negatives.
    Returns (loss, dloss/dM).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DataError("confidence matrix must be 2-D")
    pairs = np.asarray(getattr(gt_pairs, "pairs", gt_pairs), dtype=np.int64)
    pairs = pairs.reshape(-1, 2)
    if len(pairs) == 0:
        warnings.warn("no ground-truth pairs; focal loss covers negatives only")
    elif pairs[:, 0].max() >= M.shape[0] or pairs[:, 1].max() >= M.shape[1]:
        raise DataError("ground-truth pair index outside the confidence matrix")

    p = np.clip(M, _CLIP, 1.0 - _CLIP)
    pos = np.zeros(M.shape, dtype=bool)
    if len(pairs):
        pos[pairs[:, 0], pairs[:, 1]] = True

    log_p = np.log(p)
    log_q = np.log1p(-p)
    one_m = 1.0 - p
    loss_pos = -alpha * one_m**gamma * log_p
    loss_neg = -(1.0 - alpha) * p**gamma * log_q
    total = np.where(pos, loss_pos, loss_neg)
    n = M.size
    loss = float(total.sum() / n)

    if gamma == 0.0:
        grad_pos = -alpha / p
        grad_neg = (1.0 - alpha) / one_m
    else:
        grad_pos = -alpha * (-gamma * one_m**(gamma - 1.0) * log_p + one_m**gamma / p)
        grad_neg = -(1.0 - alpha) * (gamma * p**(gamma - 1.0) * log_q
                                     - p**gamma / one_m)
    grad = np.where(pos, grad_pos, grad_neg) / n
    return loss, grad


def weighted_chamfer_loss(Xhat: np.ndarray, Y: np.ndarray, scores: np.ndarray,
                          p: int = 2):
    """Overlap-weighted one-sided chamfer:

        (1/|Xhat|) sum_i s_i min_j ||xhat_i - y_j||^p

    Returns (loss, dloss/dXhat, dloss/dscores); the argmin is treated as
    locally constant when differentiating.
    """
    if p not in (1, 2):
        raise ConfigError(f"chamfer exponent must be 1 or 2, got {p}")
    Xhat = np.asarray(Xhat, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(getattr(Y, "points", Y), dtype=np.float64).reshape(-1, 3)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if len(Y) == 0:
        raise DataError("chamfer target cloud is empty")
    if len(s) != len(Xhat):
        raise DataError("one overlap score per predicted point required")
    n = len(Xhat)
    idx, dist = nearest_neighbors(Xhat, Y, 1)
    diff = Xhat - Y[idx[:, 0]]
    d = dist[:, 0]
    loss = float(np.sum(s * d**p) / n)
    grad_s = d**p / n
    if p == 2:
        grad_x = (2.0 * s)[:, None] * diff / n
    else:
        safe = np.maximum(d, _CLIP)
        grad_x = (s / safe)[:, None] * diff / n
        grad_x[d == 0.0] = 0.0
    return loss, grad_x, grad_s


def overlap_loss(scores: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy of overlap scores against 0/1 labels.
    Returns (loss, dloss/dscores)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(s) != len(y):
        raise DataError(f"scores ({len(s)}) and labels ({len(y)}) differ in length")
    if len(s) == 0:
        raise DataError("empty overlap score vector")
    p = np.clip(s, _CLIP, 1.0 - _CLIP)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / len(s)
    return loss, grad


def total_loss(ml: float, cl: float, ol: float, weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted sum of the three terms; a zero weight disables a term."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (3,) or np.any(w < 0):
        raise ConfigError("loss weights must be three non-negative numbers")
    return float(w[0] * ml + w[1] * cl + w[2] * ol)
