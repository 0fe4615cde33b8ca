"""Feature similarity, dual-softmax confidence, and correspondence selection.

Two matching routes:
  * nearest-feature baseline: each target row maps to its Euclidean nearest
    source row (many-to-one allowed), confidence 1/(1+dist);
  * dual-softmax + thresholded mutual nearest neighbor over a cosine
    similarity matrix (one-to-one by construction).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError


@dataclass
class MatchingConfig:
    """Defaults for the dual-softmax + mutual-NN selection path.

    The temperature is deliberately small: as it shrinks, the product of
    the two softmaxes concentrates on simultaneous row/column maxima, so
    selection approaches classic similarity-space mutual-NN and identical
    feature pairs keep confidences near 1 even among weakly separated
    competitors (e.g. coordinate-valued features under cosine similarity).
    """

    temperature: float = 1e-6
    threshold: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError("threshold must be in [0, 1)")


@dataclass
class CorrespondenceSet:
    """(source index, target index) pairs with per-pair confidence.

    One-to-one is guaranteed by the mutual-NN selector but not by the
    nearest-feature baseline (many targets may share a source).
    """

    pairs: np.ndarray
    confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.size % 2:
            raise DataError(f"pairs must be (n, 2), got shape {self.pairs.shape}")
        if self.pairs.ndim == 2 and self.pairs.shape[1] != 2:
            raise DataError(f"pairs must be (n, 2), got shape {self.pairs.shape}")
        self.pairs = self.pairs.reshape(-1, 2)
        if self.confidence is None:
            self.confidence = np.ones(len(self.pairs))
        self.confidence = np.asarray(self.confidence, dtype=np.float64).ravel()
        if len(self.confidence) != len(self.pairs):
            raise DataError("confidence length does not match pair count")
        if len(self.pairs):
            if self.pairs.min() < 0:
                raise DataError("negative correspondence index")
            if not np.all(np.isfinite(self.confidence)):
                raise DataError("confidence must be finite")
            if self.confidence.min() <= 0 or self.confidence.max() > 1:
                raise DataError("confidence must lie in (0, 1]")

    def __len__(self):
        return len(self.pairs)

    def is_one_to_one(self) -> bool:
        src, tgt = self.pairs[:, 0], self.pairs[:, 1]
        return (len(np.unique(src)) == len(src)) and (len(np.unique(tgt)) == len(tgt))

    def as_records(self):
        return [
            {"i": int(i), "j": int(j), "confidence": float(c)}
            for (i, j), c in zip(self.pairs, self.confidence)
        ]

    @classmethod
    def from_records(cls, records):
        pairs = [(r["i"], r["j"]) for r in records]
        conf = [r.get("confidence", 1.0) for r in records]
        return cls(np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                   np.asarray(conf, dtype=np.float64))


def save_correspondences(path, corr: CorrespondenceSet) -> None:
    with open(path, "w") as fh:
        json.dump(corr.as_records(), fh, indent=1)
        fh.write("\n")


def load_correspondences(path) -> CorrespondenceSet:
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise DataError(f"correspondence file {path} must hold a JSON array")
    return CorrespondenceSet.from_records(records)


def _normalize_rows(F: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return np.divide(F, norms, out=np.zeros_like(F), where=norms > 0)


def similarity(FA: np.ndarray, FB: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix; zero feature rows give zero scores."""
    FA = np.asarray(FA, dtype=np.float64)
    FB = np.asarray(FB, dtype=np.float64)
    if FA.ndim != 2 or FB.ndim != 2 or FA.shape[1] != FB.shape[1]:
        raise DataError(
            f"feature dims differ: {FA.shape} vs {FB.shape}"
        )
    return _normalize_rows(FA) @ _normalize_rows(FB).T


def _softmax(Z: np.ndarray, axis: int) -> np.ndarray:
    shifted = Z - Z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dual_softmax(S: np.ndarray, temperature: float = 1e-6) -> np.ndarray:
    """Confidence matrix: row-softmax(S/t) * col-softmax(S/t) elementwise."""
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    Z = np.asarray(S, dtype=np.float64) / temperature
    return _softmax(Z, axis=1) * _softmax(Z, axis=0)


def mutual_nn_threshold(M: np.ndarray, threshold: float = 0.05) -> CorrespondenceSet:
    """Pairs (i, j) where M[i, j] >= threshold and i, j are mutual argmaxes.

    Argmax ties break to the lowest index; the result is one-to-one.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise DataError("confidence matrix must be 2-D and non-empty")
    row_best = np.argmax(M, axis=1)
    col_best = np.argmax(M, axis=0)
    rows = np.arange(M.shape[0])
    mutual = col_best[row_best] == rows
    conf = M[rows, row_best]
    keep = mutual & (conf >= threshold) & (conf > 0)
    pairs = np.stack([rows[keep], row_best[keep]], axis=1)
    return CorrespondenceSet(pairs, conf[keep])


def match_by_nearest_feature(FA: np.ndarray, FB: np.ndarray) -> CorrespondenceSet:
    """Baseline: target j pairs with argmin_i ||FA_i - FB_j||, ties to the
    lower source index; confidence 1/(1+dist)."""
    FA = np.asarray(FA, dtype=np.float64)
    FB = np.asarray(FB, dtype=np.float64)
    if FA.ndim != 2 or FB.ndim != 2 or FA.shape[1] != FB.shape[1]:
        raise DataError(f"feature dims differ: {FA.shape} vs {FB.shape}")
    if len(FA) == 0 or len(FB) == 0:
        raise DataError("empty feature matrix")
    # feature space is d-dimensional, so query the tree directly
    tree = cKDTree(FA)
    if len(FA) == 1:
        dist, src = tree.query(FB, k=1)
    else:
        d2, i2 = tree.query(FB, k=2)
        dist, src = d2[:, 0], i2[:, 0]
        tied = np.isclose(d2[:, 0], d2[:, 1], rtol=0.0, atol=1e-12)
        src = np.where(tied, np.minimum(src, i2[:, 1]), src)
    pairs = np.stack([src, np.arange(len(FB))], axis=1)
    return CorrespondenceSet(pairs, 1.0 / (1.0 + dist))
