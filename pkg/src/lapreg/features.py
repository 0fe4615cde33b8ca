"""Fast point feature histograms (33-bin FPFH).

Per point, a simplified histogram (SPFH) collects the Darboux-frame angle
triplet (alpha, phi, theta) over its radius neighbors, 11 bins per angle.
The final descriptor re-weights neighbor histograms by inverse distance:

    FPFH(p) = SPFH(p) + (1/K) sum_k (1/w_k) SPFH(p_k)

Each 11-bin block of the result is normalized to unit sum.  Points with no
neighbors inside the radius get a zero descriptor and are flagged.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import PointCloud

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS


def estimate_normals(points: np.ndarray, radius: float) -> np.ndarray:
    """PCA normals over radius neighborhoods, oriented away from the centroid."""
    if radius <= 0:
        raise DataError("normal estimation radius must be > 0")
    pts = np.asarray(points, dtype=np.float64)
    tree = cKDTree(pts)
    centroid = pts.mean(axis=0)
    normals = np.zeros_like(pts)
    for i, nbrs in enumerate(tree.query_ball_point(pts, radius)):
        local = pts[nbrs] - pts[nbrs].mean(axis=0)
        if len(nbrs) < 3:
            d = pts[i] - centroid
            n = np.linalg.norm(d)
            normals[i] = d / n if n > 1e-12 else (0.0, 0.0, 1.0)
            continue
        _, _, vt = np.linalg.svd(local, full_matrices=False)
        n = vt[2]
        if np.dot(n, pts[i] - centroid) < 0:
            n = -n
        normals[i] = n
    return normals


def _pair_angles(p_i, p_j, n_i, n_j):
    """Darboux angle triplet per pair; the endpoint whose normal is better
    aligned with the connecting line acts as the frame origin."""
    d = p_j - p_i
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 1e-12
    d_hat = np.zeros_like(d)
    d_hat[ok] = d[ok] / dist[ok, None]

    cos_i = np.einsum("ij,ij->i", n_i, d_hat)
    cos_j = np.einsum("ij,ij->i", n_j, -d_hat)
    swap = cos_j > cos_i
    u = np.where(swap[:, None], n_j, n_i)
    n_t = np.where(swap[:, None], n_i, n_j)
    dvec = np.where(swap[:, None], -d_hat, d_hat)

    v = np.cross(dvec, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 1e-12  # normal parallel to the line: frame undefined, skip
    v[ok] /= vn[ok, None]
    w = np.cross(u, v)

    alpha = np.einsum("ij,ij->i", v, n_t)
    phi = np.einsum("ij,ij->i", u, dvec)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_t),
                       np.einsum("ij,ij->i", u, n_t))
    return alpha, phi, theta, dist, ok


def _bin_index(values, lo, hi):
    idx = np.floor((values - lo) / (hi - lo) * FPFH_BINS).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def compute_fpfh(cloud: PointCloud, normal_radius: float = 0.025,
                 feature_radius: float = 0.05):
    """Returns (features (n, 33), no_neighbor_mask (n,)).

    Uses the cloud's normals when present; otherwise estimates them with
    PCA over normal_radius neighborhoods.
    """
    if normal_radius <= 0 or feature_radius <= 0:
        raise DataError("FPFH radii must be > 0")
    pts = cloud.points
    n = len(pts)
    normals = cloud.normals
    if normals is None:
        normals = estimate_normals(pts, normal_radius)

    tree = cKDTree(pts)
    pairs = tree.query_pairs(feature_radius, output_type="ndarray")
    spfh = np.zeros((n, FPFH_DIM))
    counts = np.zeros(n, dtype=np.int64)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        alpha, phi, theta, dist, ok = _pair_angles(
            pts[i], pts[j], normals[i], normals[j]
        )
        i, j, dist = i[ok], j[ok], dist[ok]
        b0 = _bin_index(alpha[ok], -1.0, 1.0)
        b1 = _bin_index(phi[ok], -1.0, 1.0) + FPFH_BINS
        b2 = _bin_index(theta[ok], -np.pi, np.pi) + 2 * FPFH_BINS
        for b in (b0, b1, b2):
            flat_i = i * FPFH_DIM + b
            flat_j = j * FPFH_DIM + b
            hits = np.bincount(np.concatenate([flat_i, flat_j]),
                               minlength=n * FPFH_DIM)
            spfh += hits.reshape(n, FPFH_DIM)
        counts = np.bincount(np.concatenate([i, j]), minlength=n)

        inv_w = 1.0 / dist
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        vals = np.concatenate([inv_w, inv_w])
        adj = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        neighbor_term = adj @ spfh
    else:
        neighbor_term = np.zeros_like(spfh)

    no_neighbors = counts == 0
    safe = np.maximum(counts, 1)
    fpfh = spfh + neighbor_term / safe[:, None]
    fpfh[no_neighbors] = 0.0

    # unit-sum per 11-bin block
    blocks = fpfh.reshape(n, 3, FPFH_BINS)
    sums = blocks.sum(axis=2, keepdims=True)
    blocks = np.divide(blocks, sums, out=np.zeros_like(blocks), where=sums > 0)
    return blocks.reshape(n, FPFH_DIM), no_neighbors
