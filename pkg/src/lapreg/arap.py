"""As-rigid-as-possible surface deformation.

Local-global alternation: per-vertex rotations are fit by SVD of the
weighted edge covariance, then positions are recovered from a constrained
Laplacian solve whose factorization is reused across iterations.  The
deformation energy

    E = sum_ij w_ij || (p'_i - p'_j) - R_i (p_i - p_j) ||^2

is non-increasing across iterations.  Constraint generators produce the
two deformation families used by the synthetic dataset: surface
compression (inward displacement along vertex normals) and lobe motion
(random displacements inside a labelled region).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import splu

from .errors import ConfigError, DataError, SolverError
from .geometry import TriMesh, best_fit_rigid, compute_vertex_normals

_WEIGHT_SCHEMES = ("cotangent", "uniform")


@dataclass
class DeformationConstraints:
    """Prescribed positions for handle vertices plus pinned anchors."""

    handle_indices: np.ndarray
    handle_targets: np.ndarray
    anchor_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.handle_indices = np.asarray(self.handle_indices, dtype=np.int64).ravel()
        self.anchor_indices = np.asarray(self.anchor_indices, dtype=np.int64).ravel()
        self.handle_targets = np.asarray(self.handle_targets, dtype=np.float64)
        if self.handle_targets.shape != (len(self.handle_indices), 3):
            raise DataError(
                f"handle_targets shape {self.handle_targets.shape} does not match "
                f"{len(self.handle_indices)} handles"
            )
        if not np.all(np.isfinite(self.handle_targets)):
            raise DataError("handle_targets must be finite")
        if len(np.intersect1d(self.handle_indices, self.anchor_indices)):
            raise DataError("handle and anchor index sets must be disjoint")
        if len(np.unique(self.handle_indices)) != len(self.handle_indices):
            raise DataError("handle_indices contains duplicates")
        if len(np.unique(self.anchor_indices)) != len(self.anchor_indices):
            raise DataError("anchor_indices contains duplicates")

    @property
    def num_constrained(self) -> int:
        return len(self.handle_indices) + len(self.anchor_indices)


@dataclass
class ArapConfig:
    max_iterations: int = 10
    energy_tolerance: float = 1e-6
    weight_scheme: str = "cotangent"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.energy_tolerance <= 0:
            raise ConfigError("energy_tolerance must be > 0")
        if self.weight_scheme not in _WEIGHT_SCHEMES:
            raise ConfigError(
                f"weight_scheme must be one of {_WEIGHT_SCHEMES}, "
                f"got '{self.weight_scheme}'"
            )


def build_laplacian(mesh: TriMesh, scheme: str = "cotangent") -> sp.csr_matrix:
    """Graph Laplacian L = D - W with symmetric edge weights.

    Cotangent weights are clamped to >= 0 so L stays positive
    semidefinite; degenerate triangles contribute zero.  Rows sum to 0.
    """
    if scheme not in _WEIGHT_SCHEMES:
        raise ConfigError(f"unknown weight scheme '{scheme}'")
    n = mesh.num_vertices
    if scheme == "uniform":
        e = mesh.edges()
        w = np.ones(len(e))
    else:
        e, w = _cotangent_edge_weights(mesh)
    i, j = e[:, 0], e[:, 1]
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    vals = np.concatenate([w, w])
    W = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsr()


def _cotangent_edge_weights(mesh: TriMesh):
    """Per undirected edge weight (cot a + cot b) / 2, clamped to >= 0."""
    V, F = mesh.vertices, mesh.faces
    n = mesh.num_vertices
    keys = []
    cots = []
    for corner in range(3):
        k = F[:, corner]
        i = F[:, (corner + 1) % 3]
        j = F[:, (corner + 2) % 3]
        u = V[i] - V[k]
        v = V[j] - V[k]
        cross = np.cross(u, v)
        area2 = np.linalg.norm(cross, axis=1)
        dot = np.einsum("ij,ij->i", u, v)
        cot = np.where(area2 > 1e-30, dot / np.maximum(area2, 1e-300), 0.0)
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        keys.append(lo * n + hi)
        cots.append(0.5 * cot)
    keys = np.concatenate(keys)
    cots = np.concatenate(cots)
    uniq, inv = np.unique(keys, return_inverse=True)
    w = np.zeros(len(uniq))
    np.add.at(w, inv, cots)
    w = np.maximum(w, 0.0)
    edges = np.stack([uniq // n, uniq % n], axis=1).astype(np.int64)
    return edges, w


def _validate_constraints(mesh: TriMesh, constraints: DeformationConstraints):
    n = mesh.num_vertices
    idx = np.concatenate([constraints.handle_indices, constraints.anchor_indices])
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise DataError(f"constraint index out of range [0, {n})")
    if len(idx) < 3:
        raise ConfigError("need at least 3 constrained vertices")
    targets = np.vstack(
        [constraints.handle_targets, mesh.vertices[constraints.anchor_indices]]
    )
    centered = targets - targets.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise ConfigError("constrained vertices are collinear; the solve is underdetermined")


def _fit_rotations(src_edges, cur_edges, weights, owners, n):
    """Per-vertex rotation best aligning rest edge stars to current ones."""
    C = np.empty((n, 3, 3))
    ws = weights[:, None] * src_edges
    for a in range(3):
        for b in range(3):
            C[:, a, b] = np.bincount(owners, weights=ws[:, a] * cur_edges[:, b],
                                     minlength=n)
    U, _, Vt = np.linalg.svd(C)
    V = np.swapaxes(Vt, 1, 2)
    R = V @ np.swapaxes(U, 1, 2)
    bad = np.linalg.det(R) < 0
    if np.any(bad):
        V[bad, :, 2] *= -1.0
        R[bad] = V[bad] @ np.swapaxes(U[bad], 1, 2)
    return R


def arap_energy(src_edges, cur_edges, weights, owners, rotations):
    rotated = np.einsum("eij,ej->ei", rotations[owners], src_edges)
    diff = cur_edges - rotated
    return float(np.sum(weights * np.einsum("ei,ei->e", diff, diff)))


def arap_solve(
    mesh: TriMesh,
    constraints: DeformationConstraints,
    config: ArapConfig | None = None,
    return_energies: bool = False,
):
    """Deform the mesh so constrained vertices land exactly on their targets.

    Initializes from the best-fit rigid motion of the constrained set, so
    constraint patterns that are themselves rigid are reproduced exactly.
    """
    if config is None:
        config = ArapConfig()
    _validate_constraints(mesh, constraints)
    n = mesh.num_vertices
    V = mesh.vertices

    L = build_laplacian(mesh, config.weight_scheme)
    Wg = sp.diags(L.diagonal()) - L  # weight matrix back out of the Laplacian
    Wc = Wg.tocoo()
    owners = Wc.row
    neighbors = Wc.col
    weights = Wc.data
    src_edges = V[owners] - V[neighbors]

    fixed_idx = np.concatenate([constraints.handle_indices, constraints.anchor_indices])
    fixed_pos = np.vstack(
        [constraints.handle_targets, V[constraints.anchor_indices]]
    )
    free_mask = np.ones(n, dtype=bool)
    free_mask[fixed_idx] = False
    free_idx = np.flatnonzero(free_mask)

    L_csr = L.tocsr()
    L_ff = L_csr[free_idx][:, free_idx].tocsc()
    L_fc = L_csr[free_idx][:, fixed_idx].tocsr()
    try:
        factor = splu(L_ff)
    except RuntimeError as exc:
        raise SolverError(
            f"constrained Laplacian is singular ({exc}); the constraint set "
            "leaves part of the surface unsupported"
        )

    init = best_fit_rigid(V[fixed_idx], fixed_pos)
    P = init.apply(V)
    P[fixed_idx] = fixed_pos

    energies = []
    prev = None
    for _ in range(config.max_iterations):
        cur_edges = P[owners] - P[neighbors]
        rotations = _fit_rotations(src_edges, cur_edges, weights, owners, n)
        # rhs_i = sum_j w_ij (R_i + R_j)/2 (p_i - p_j)
        pair_rot = 0.5 * (rotations[owners] + rotations[neighbors])
        contrib = np.einsum("eij,ej->ei", pair_rot, src_edges) * weights[:, None]
        b = np.empty((n, 3))
        for a in range(3):
            b[:, a] = np.bincount(owners, weights=contrib[:, a], minlength=n)
        if len(free_idx):
            rhs = b[free_idx] - L_fc @ fixed_pos
            P[free_idx] = factor.solve(rhs)
        cur_edges = P[owners] - P[neighbors]
        e = arap_energy(src_edges, cur_edges, weights, owners, rotations)
        energies.append(e)
        if prev is not None and abs(prev - e) < config.energy_tolerance * max(prev, 1e-30):
            break
        prev = e
    if return_energies:
        return P, energies
    return P


# ---------------------------------------------------------------------------
# Constraint generators

def _geodesic_graph(mesh: TriMesh) -> sp.csr_matrix:
    e = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.num_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    vals = np.concatenate([lengths, lengths])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _geodesic_from(mesh: TriMesh, seed: int, graph=None) -> np.ndarray:
    if graph is None:
        graph = _geodesic_graph(mesh)
    return dijkstra(graph, indices=seed, directed=False)


def _nearest_by_geodesic(dist: np.ndarray, candidates: np.ndarray, count: int):
    """First `count` candidates ordered by distance, ties to lower index."""
    order = np.lexsort((candidates, dist[candidates]))
    return np.sort(candidates[order[:count]])


def gen_compression(
    mesh: TriMesh,
    rng: np.random.Generator,
    handle_fraction: float = 0.1,
    anchor_fraction: float = 0.1,
    max_magnitude: float = 0.1,
    normals: np.ndarray | None = None,
    seed_candidates=None,
) -> DeformationConstraints:
    """Insufflation-style compression: a contiguous handle patch is pushed
    inward along vertex normals by uniform random magnitudes.

    rng draws, in order: seed vertex index, then one magnitude per handle.
    seed_candidates optionally restricts which vertices may seed the patch.
    """
    n = mesh.num_vertices
    if seed_candidates is None:
        seed = int(rng.integers(n))
    else:
        cand = np.asarray(seed_candidates, dtype=np.int64).ravel()
        if len(cand) == 0:
            raise ConfigError("seed_candidates is empty")
        if cand.min() < 0 or cand.max() >= n:
            raise DataError(f"seed candidate index out of range [0, {n})")
        seed = int(cand[rng.integers(len(cand))])
    graph = _geodesic_graph(mesh)
    dist = _geodesic_from(mesh, seed, graph)
    num_handles = max(1, int(round(handle_fraction * n)))
    handles = _nearest_by_geodesic(dist, np.arange(n), num_handles)

    far = int(np.argmax(np.where(np.isfinite(dist), dist, -1.0)))
    dist_far = _geodesic_from(mesh, far, graph)
    complement = np.setdiff1d(np.arange(n), handles)
    num_anchors = min(len(complement), max(1, int(round(anchor_fraction * n))))
    anchors = _nearest_by_geodesic(dist_far, complement, num_anchors)

    if normals is None:
        normals = compute_vertex_normals(mesh)[0]
    mags = rng.uniform(0.0, max_magnitude, len(handles))
    targets = mesh.vertices[handles] - mags[:, None] * normals[handles]
    return DeformationConstraints(handles, targets, anchors)


def gen_lobe(
    mesh: TriMesh,
    rng: np.random.Generator,
    lobe_indices,
    handle_fraction: float = 0.1,
    anchor_fraction: float = 0.1,
    max_magnitude: float = 0.25,
) -> DeformationConstraints:
    """Lobe motion: handles inside the labelled lobe get displacements with
    directions uniform on the sphere and uniform random magnitudes; anchors
    sit in the complement region.

    rng draws, in order: seed position in the lobe list, then one direction
    per handle (3 normals each), then one magnitude per handle.
    """
    lobe = np.unique(np.asarray(lobe_indices, dtype=np.int64).ravel())
    if len(lobe) == 0:
        raise ConfigError("lobe vertex set is empty")
    n = mesh.num_vertices
    if lobe.min() < 0 or lobe.max() >= n:
        raise DataError(f"lobe index out of range [0, {n})")
    seed = int(lobe[rng.integers(len(lobe))])
    graph = _geodesic_graph(mesh)
    dist = _geodesic_from(mesh, seed, graph)
    num_handles = max(1, int(round(handle_fraction * len(lobe))))
    handles = _nearest_by_geodesic(dist, lobe, num_handles)

    complement = np.setdiff1d(np.arange(n), lobe)
    if len(complement) == 0:
        raise ConfigError("lobe covers the whole mesh; no anchor region left")
    far = int(complement[np.argmax(np.where(np.isfinite(dist[complement]), dist[complement], -1.0))])
    dist_far = _geodesic_from(mesh, far, graph)
    num_anchors = min(len(complement), max(1, int(round(anchor_fraction * n))))
    anchors = _nearest_by_geodesic(dist_far, complement, num_anchors)

    dirs = rng.normal(size=(len(handles), 3))
    norms = np.linalg.norm(dirs, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        dirs[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(dirs, axis=1)
    dirs /= norms[:, None]
    mags = rng.uniform(0.0, max_magnitude, len(handles))
    targets = mesh.vertices[handles] + mags[:, None] * dirs
    return DeformationConstraints(handles, targets, anchors)
