"""Geometric primitives shared by every stage of the pipeline.

Containers (point clouds, surface and volume meshes, rigid transforms,
keypoint sets) validate their invariants on construction and are treated
as immutable afterwards.  All coordinates are float64, shape (n, 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

_UNIT_NORM_TOL = 1e-6
_ORTHO_TOL = 1e-9


def _as_points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise DataError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite coordinates")
    return a


@dataclass
class PointCloud:
    """Dense 3D point set, optionally with unit normals (one per point)."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = _as_points(self.points, "points")
        if self.normals is not None:
            self.normals = _as_points(self.normals, "normals")
            if len(self.normals) != len(self.points):
                raise DataError(
                    f"normal count {len(self.normals)} != point count {len(self.points)}"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            bad = np.abs(norms - 1.0) > _UNIT_NORM_TOL
            if np.any(bad):
                raise DataError(
                    f"{int(bad.sum())} normals deviate from unit length by more "
                    f"than {_UNIT_NORM_TOL}"
                )

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    """Triangle surface mesh. Every vertex must be referenced by a face."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = _as_points(self.vertices, "vertices")
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataError(f"faces must have shape (m, 3), got {self.faces.shape}")
        nv = len(self.vertices)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise DataError(f"face index out of range for {nv} vertices")
        f = self.faces
        if len(f) and np.any(
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ):
            raise DataError("degenerate face with repeated vertex index")
        referenced = np.zeros(nv, dtype=bool)
        referenced[f.ravel()] = True
        if not referenced.all():
            raise DataError(
                f"{int((~referenced).sum())} vertices not referenced by any face"
            )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with e[:,0] < e[:,1]."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)


def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volume of each tetrahedron."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(tets, dtype=np.int64)
    a = v[t[:, 1]] - v[t[:, 0]]
    b = v[t[:, 2]] - v[t[:, 0]]
    c = v[t[:, 3]] - v[t[:, 0]]
    return np.einsum("ij,ij->i", np.cross(a, b), c) / 6.0


def orient_tets(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Swap the last two indices of negatively oriented tets.

    Raises DataError for zero-volume elements, which no orientation fixes.
    """
    tets = np.array(tets, dtype=np.int64, copy=True)
    vol = tet_volumes(vertices, tets)
    if np.any(vol == 0.0):
        bad = int(np.flatnonzero(vol == 0.0)[0])
        raise DataError(f"tetrahedron {bad} has zero volume")
    flip = vol < 0.0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets


@dataclass
class TetMesh:
    """Tetrahedral volume mesh with consistently positive element volumes."""

    vertices: np.ndarray
    tets: np.ndarray

    def __post_init__(self):
        self.vertices = _as_points(self.vertices, "vertices")
        self.tets = np.asarray(self.tets, dtype=np.int64)
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise DataError(f"tets must have shape (t, 4), got {self.tets.shape}")
        nv = len(self.vertices)
        if len(self.tets) and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise DataError(f"tet index out of range for {nv} vertices")
        vol = tet_volumes(self.vertices, self.tets)
        if np.any(vol <= 0.0):
            bad = int(np.flatnonzero(vol <= 0.0)[0])
            raise DataError(
                f"tetrahedron {bad} has non-positive volume {vol[bad]:.3e}; "
                "orient with orient_tets() first"
            )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    def boundary_faces(self) -> np.ndarray:
        """Outward-oriented boundary triangles (faces used by exactly one tet)."""
        t = self.tets
        # Faces ordered so their normals point away from the opposite vertex.
        faces = np.concatenate(
            [t[:, [1, 2, 3]], t[:, [0, 3, 2]], t[:, [0, 1, 3]], t[:, [0, 2, 1]]]
        )
        key = np.sort(faces, axis=1)
        _, inverse, counts = np.unique(
            key, axis=0, return_inverse=True, return_counts=True
        )
        return faces[counts[inverse] == 1]


@dataclass
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise DataError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise DataError(f"rotation not orthonormal (max deviation {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise DataError(f"rotation determinant {det:.12f} != +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying `other` first, then this one."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix34(self) -> np.ndarray:
        """3x4 row-major [R | t] block used in sample metadata."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def from_matrix34(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


@dataclass
class KeypointSet:
    """Reduced point set plus a total assignment of dense points to keypoints."""

    keypoints: np.ndarray
    assignment: np.ndarray

    def __post_init__(self):
        self.keypoints = _as_points(self.keypoints, "keypoints")
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        k = len(self.keypoints)
        if self.assignment.ndim != 1:
            raise DataError("assignment must be a flat index array")
        if len(self.assignment) and (
            self.assignment.min() < 0 or self.assignment.max() >= k
        ):
            raise DataError("assignment index out of keypoint range")
        owned = np.bincount(self.assignment, minlength=k)
        if np.any(owned == 0):
            raise DataError(f"{int((owned == 0).sum())} keypoints own no dense point")

    def __len__(self) -> int:
        return len(self.keypoints)


@dataclass
class Normalization:
    """Centroid/diagonal normalization applied to every patient on ingestion.

    Normalized coordinates are (x - centroid) / diagonal, so the bounding
    box diagonal of the normalized model is 1.  `diagonal` keeps the
    original units (mm for CT-derived meshes) for metric reporting.
    """

    centroid: np.ndarray
    diagonal: float

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        if not self.diagonal > 0:
            raise DataError(f"normalization diagonal must be positive, got {self.diagonal}")

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.diagonal

    def to_original(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.diagonal + self.centroid


def unit_normalize(points: np.ndarray) -> tuple[np.ndarray, Normalization]:
    """Translate to centroid origin and scale the bounding-box diagonal to 1."""
    pts = _as_points(points, "points")
    centroid = pts.mean(axis=0)
    extent = pts.max(axis=0) - pts.min(axis=0)
    diagonal = float(np.linalg.norm(extent))
    if diagonal == 0.0:
        raise DataError("cannot normalize a degenerate (single-point) model")
    norm = Normalization(centroid, diagonal)
    return norm.to_normalized(pts), norm


def compute_vertex_normals(mesh: TriMesh) -> tuple[np.ndarray, int]:
    """Area-weighted vertex normals.

    Returns (normals, fallback_count) where fallback_count is the number of
    vertices whose incident faces sum to a zero area vector; those receive
    the unit normal of an arbitrary incident face instead.
    """
    v, f = mesh.vertices, mesh.faces
    face_n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], face_n)
    norms = np.linalg.norm(acc, axis=1)
    fallback = np.flatnonzero(norms < 1e-300)
    for vi in fallback:
        fi = int(np.flatnonzero((f == vi).any(axis=1))[0])
        n = face_n[fi]
        ln = np.linalg.norm(n)
        acc[vi] = n / ln if ln > 0 else (0.0, 0.0, 1.0)
        norms[vi] = 1.0
    return acc / norms[:, None], len(fallback)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> KeypointSet:
    """One keypoint (cell centroid) per occupied voxel of an axis-aligned grid.

    Keypoints are ordered by first appearance of their voxel in the input
    point order, which makes the result deterministic for a fixed input.
    """
    if not voxel_size > 0:
        raise DataError(f"voxel_size must be positive, got {voxel_size}")
    pts = cloud.points
    if len(pts) == 0:
        raise DataError("cannot downsample an empty cloud")
    origin = pts.min(axis=0)
    cell = np.floor((pts - origin) / voxel_size).astype(np.int64)
    ranges = cell.max(axis=0) + 1
    flat = (cell[:, 0] * ranges[1] + cell[:, 1]) * ranges[2] + cell[:, 2]
    uniq, inverse = np.unique(flat, return_inverse=True)
    first_pos = np.full(len(uniq), len(pts), dtype=np.int64)
    np.minimum.at(first_pos, inverse, np.arange(len(pts)))
    order = np.argsort(first_pos, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order] = np.arange(len(uniq))
    assignment = rank[inverse]
    centroids = np.zeros((len(uniq), 3))
    np.add.at(centroids, assignment, pts)
    counts = np.bincount(assignment, minlength=len(uniq)).astype(np.float64)
    centroids /= counts[:, None]
    return KeypointSet(centroids, assignment)


def apply_rigid(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Map points x -> Rx + t and normals n -> Rn."""
    pts = transform.apply(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation.T
    return PointCloud(pts, normals)


def nearest_neighbors(
    query: np.ndarray, target: np.ndarray, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact k-nearest neighbors under Euclidean distance.

    Ties are broken by the lower target index, matching a brute-force scan
    that sorts candidates by (distance, index).  Returns (indices, distances)
    of shape (q, count) each.
    """
    query = _as_points(np.atleast_2d(query), "query")
    target = _as_points(np.atleast_2d(target), "target")
    n = len(target)
    if n == 0:
        raise DataError("nearest_neighbors: empty target cloud")
    if not 1 <= count <= n:
        raise DataError(f"count must be in [1, {n}], got {count}")
    tree = cKDTree(target)
    probe = min(count + 1, n)
    dist, idx = tree.query(query, k=probe)
    dist = dist.reshape(len(query), probe)
    idx = idx.reshape(len(query), probe)
    out_idx = np.empty((len(query), count), dtype=np.int64)
    out_dist = np.empty((len(query), count))
    for qi in range(len(query)):
        d, i = dist[qi], idx[qi]
        if probe > count and d[count] == d[count - 1]:
            # Tie straddles the cut: fall back to a full scan for this query.
            full = np.linalg.norm(target - query[qi], axis=1)
            sel = np.lexsort((np.arange(n), full))[:count]
            out_idx[qi] = sel
            out_dist[qi] = full[sel]
        else:
            take = np.lexsort((i[:count], d[:count]))
            out_idx[qi] = i[:count][take]
            out_dist[qi] = d[:count][take]
    return out_idx, out_dist


def best_fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Rigid transform minimizing sum ||R s + t - d||^2 (proper rotation).

    Degenerate point sets (fewer than 3 points, or a rank-deficient
    covariance) fall back deterministically through the SVD's canonical
    factors; a single point pair yields a pure translation.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or len(src) == 0:
        raise DataError("best_fit_rigid needs matching non-empty point sets")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    if np.allclose(H, 0.0):
        return RigidTransform(np.eye(3), dc - sc)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[2] *= -1.0
        R = Vt.T @ U.T
    return RigidTransform(R, dc - R @ sc)


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_rigid(
    rng: np.random.Generator, max_angle_deg: float, max_translation: float
) -> RigidTransform:
    """Uniform random axis, angle uniform in [0, max_angle], translation
    uniform in the centered cube of half-width max_translation."""
    if not 0.0 <= max_angle_deg <= 180.0:
        raise DataError(f"max_angle_deg must be in [0, 180], got {max_angle_deg}")
    if max_translation < 0.0:
        raise DataError(f"max_translation must be >= 0, got {max_translation}")
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rotation_about_axis(axis, angle), translation)
