"""Matching and registration metrics, plus batch aggregation.

Matching quality is scored as matching score MS (correct predictions over
available ground-truth pairs) and inlier ratio IR (correct predictions over
all predictions), both in percent.  Registration quality is scored as TRE
over hidden vertices, FRE at matched vertices, and symmetric Hausdorff
distance, all reported in de-normalized units (mm) via a scale factor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import nearest_neighbors
from .matching import CorrespondenceSet


@dataclass
class MatchMetrics:
    matching_score: float
    inlier_ratio: float
    exact_match_count: int
    predicted_count: int
    gt_count: int
    predictions_empty: bool = False

    def __post_init__(self):
        if not (0.0 <= self.matching_score <= 100.0
                and 0.0 <= self.inlier_ratio <= 100.0):
            raise DataError("MS and IR must lie in [0, 100]")
        if self.exact_match_count > min(self.predicted_count, self.gt_count):
            raise DataError("exact matches exceed predicted or gt count")

    def as_dict(self) -> dict:
        return {
            "matching_score": self.matching_score,
            "inlier_ratio": self.inlier_ratio,
            "exact_match_count": self.exact_match_count,
            "predicted_count": self.predicted_count,
            "gt_count": self.gt_count,
        }


@dataclass
class ErrorStats:
    mean: float
    std: float
    max: float
    count: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "max": self.max,
                "count": self.count}


def _pair_key(pairs: np.ndarray, width: int) -> np.ndarray:
    return pairs[:, 0].astype(np.int64) * width + pairs[:, 1].astype(np.int64)


def matching_metrics(pred: CorrespondenceSet, gt: CorrespondenceSet,
                     tolerance=None, positions=None) -> MatchMetrics:
    """Score predicted against ground-truth correspondences.

    A prediction is exact when the ordered pair (i, j) appears in the ground
    truth.  With `tolerance` set, a prediction (i, j) also counts when the
    deformed position of point i lies within tolerance of the deformed
    position of the ground-truth partner of j; `positions` then supplies a
    per-i 3D position array.
    """
    gp, pp = gt.pairs, pred.pairs
    if len(gp) == 0:
        raise DataError("ground truth has no pairs")
    if len(pp) == 0:
        return MatchMetrics(0.0, 0.0, 0, 0, len(gp), predictions_empty=True)
    width = int(max(gp[:, 1].max(), pp[:, 1].max())) + 1
    if tolerance is None:
        exact = int(np.isin(_pair_key(pp, width), _pair_key(gp, width)).sum())
    else:
        if positions is None:
            raise DataError("distance-tolerant scoring needs positions")
        positions = np.asarray(positions, dtype=np.float64)
        partner = np.full(width, -1, dtype=np.int64)
        partner[gp[:, 1]] = gp[:, 0]
        gt_i = partner[pp[:, 1]]
        has_gt = gt_i >= 0
        d = np.full(len(pp), np.inf)
        d[has_gt] = np.linalg.norm(
            positions[pp[has_gt, 0]] - positions[gt_i[has_gt]], axis=1)
        exact = int((d <= tolerance).sum())
    ms = 100.0 * exact / len(gp)
    ir = 100.0 * exact / len(pp)
    return MatchMetrics(ms, ir, exact, len(pp), len(gp))


def _stats(dists: np.ndarray, scale: float) -> ErrorStats:
    d = dists * scale
    return ErrorStats(float(d.mean()), float(d.std()), float(d.max()), len(d))


def tre(registered, gt_deformed, hidden_mask, scale_mm=1.0) -> ErrorStats:
    """Target registration error over the hidden (never visible) vertices."""
    registered = np.asarray(registered, dtype=np.float64)
    gt_deformed = np.asarray(gt_deformed, dtype=np.float64)
    hidden_mask = np.asarray(hidden_mask, dtype=bool)
    if registered.shape != gt_deformed.shape or len(hidden_mask) != len(registered):
        raise DataError("tre inputs must align per vertex")
    if not hidden_mask.any():
        raise DataError("no hidden vertices to evaluate")
    d = np.linalg.norm(registered[hidden_mask] - gt_deformed[hidden_mask], axis=1)
    return _stats(d, scale_mm)


def fre(registered, matches: CorrespondenceSet, targets, scale_mm=1.0) -> ErrorStats:
    """Fiducial registration error: residual at the matched vertices."""
    if len(matches) == 0:
        raise DataError("fre needs at least one match")
    registered = np.asarray(registered, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    p = matches.pairs
    d = np.linalg.norm(registered[p[:, 0]] - targets[p[:, 1]], axis=1)
    return _stats(d, scale_mm)


def hausdorff(a, b, sided="symmetric", scale_mm=1.0) -> float:
    """Hausdorff distance between point sets (symmetric max-min by default)."""
    a = np.asarray(getattr(a, "points", a), dtype=np.float64).reshape(-1, 3)
    b = np.asarray(getattr(b, "points", b), dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DataError("hausdorff needs non-empty point sets")
    if sided not in ("symmetric", "forward", "backward"):
        raise DataError(f"unknown sidedness '{sided}'")
    _, dab = nearest_neighbors(a, b, 1)
    _, dba = nearest_neighbors(b, a, 1)
    fwd = float(dab.max())
    bwd = float(dba.max())
    if sided == "forward":
        return fwd * scale_mm
    if sided == "backward":
        return bwd * scale_mm
    return max(fwd, bwd) * scale_mm


def aggregate(per_sample) -> dict:
    """Mean and population std per metric over a batch of sample dicts."""
    per_sample = list(per_sample)
    if not per_sample:
        raise DataError("nothing to aggregate")
    names = []
    for rec in per_sample:
        for name in rec:
            if name not in names:
                names.append(name)
    out = {}
    for name in names:
        vals = np.array([float(rec[name]) for rec in per_sample if name in rec])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std()),
                     "count": int(len(vals))}
    return out


def format_table(agg: dict) -> str:
    """Aligned plain-text table: metric, mean +/- std, sample count."""
    lines = [f"{'metric':<28}{'mean':>12}{'std':>12}{'n':>6}",
             "-" * 58]
    for name, rec in agg.items():
        lines.append(
            f"{name:<28}{rec['mean']:>12.4f}{rec['std']:>12.4f}{rec['count']:>6d}"
        )
    return "\n".join(lines)
