import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lapreg.errors import DataError
from lapreg.geometry import (KeypointSet, Normalization, PointCloud,
                             RigidTransform, TetMesh, TriMesh, apply_rigid,
                             best_fit_rigid, compute_vertex_normals,
                             nearest_neighbors, orient_tets, random_rigid,
                             rotation_about_axis, tet_volumes, unit_normalize,
                             voxel_downsample)


def brute_knn(query, target, k):
    d = np.linalg.norm(query[:, None, :] - target[None, :, :], axis=2)
    # stable sort keeps the lower index on exact ties
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


class TestRigidTransform:
    def test_apply_matches_direct_formula(self, rng):
        T = random_rigid(rng, 90.0, 0.5)
        pts = rng.normal(size=(40, 3))
        np.testing.assert_allclose(T.apply(pts), pts @ T.rotation.T + T.translation)

    def test_inverse_roundtrip(self, rng):
        T = random_rigid(rng, 120.0, 1.0)
        pts = rng.normal(size=(25, 3))
        np.testing.assert_allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-12)

    def test_compose_is_sequential_application(self, rng):
        A = random_rigid(rng, 60.0, 0.3)
        B = random_rigid(rng, 60.0, 0.3)
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            A.compose(B).apply(pts), A.apply(B.apply(pts)), atol=1e-12)

    def test_matrix34_roundtrip(self, rng):
        T = random_rigid(rng, 45.0, 0.2)
        M = T.as_matrix34()
        assert M.shape == (3, 4)
        back = RigidTransform.from_matrix34(M)
        np.testing.assert_allclose(back.rotation, T.rotation)
        np.testing.assert_allclose(back.translation, T.translation)

    def test_identity(self):
        pts = np.eye(3)
        np.testing.assert_array_equal(RigidTransform.identity().apply(pts), pts)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(DataError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))


def test_rotation_about_axis_matches_scipy(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        angle = rng.uniform(-np.pi, np.pi)
        R = rotation_about_axis(axis, angle)
        expected = Rotation.from_rotvec(
            angle * axis / np.linalg.norm(axis)).as_matrix()
        np.testing.assert_allclose(R, expected, atol=1e-12)


def test_random_rigid_respects_limits(rng):
    for _ in range(50):
        T = random_rigid(rng, 25.0, 0.07)
        np.testing.assert_allclose(T.rotation @ T.rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(T.rotation) > 0
        angle = np.degrees(np.arccos(np.clip((np.trace(T.rotation) - 1) / 2, -1, 1)))
        assert angle <= 25.0 + 1e-9
        assert np.all(np.abs(T.translation) <= 0.07 + 1e-12)


def test_best_fit_rigid_recovers_known_transform(rng):
    src = rng.normal(size=(60, 3))
    T = random_rigid(rng, 170.0, 2.0)
    est = best_fit_rigid(src, T.apply(src))
    np.testing.assert_allclose(est.rotation, T.rotation, atol=1e-9)
    np.testing.assert_allclose(est.translation, T.translation, atol=1e-9)


def test_best_fit_rigid_is_least_squares_optimal(rng):
    # perturbing the estimate can only increase the residual
    src = rng.normal(size=(40, 3))
    dst = src @ rotation_about_axis(np.array([1.0, 2.0, 0.5]), 0.4).T + 0.1
    dst = dst + rng.normal(0.0, 0.01, dst.shape)
    est = best_fit_rigid(src, dst)
    base = np.sum((est.apply(src) - dst) ** 2)
    for _ in range(10):
        d_angle = rng.normal(0, 0.02)
        d_axis = rng.normal(size=3)
        R2 = rotation_about_axis(d_axis, d_angle) @ est.rotation
        t2 = est.translation + rng.normal(0, 0.01, 3)
        perturbed = np.sum((src @ R2.T + t2 - dst) ** 2)
        assert perturbed >= base - 1e-12


class TestNearestNeighbors:
    def test_matches_brute_force(self, rng):
        q = rng.normal(size=(30, 3))
        t = rng.normal(size=(50, 3))
        for k in (1, 3, 5):
            idx, dist = nearest_neighbors(q, t, k)
            bidx, bdist = brute_knn(q, t, k)
            np.testing.assert_allclose(dist, bdist, atol=1e-12)
            np.testing.assert_array_equal(idx, bidx)

    def test_exact_tie_prefers_lower_index(self):
        target = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
        idx, dist = nearest_neighbors(np.zeros((1, 3)), target, 2)
        assert idx[0, 0] == 0
        np.testing.assert_allclose(dist[0], [1.0, 1.0])

    def test_errors(self):
        with pytest.raises(DataError):
            nearest_neighbors(np.zeros((2, 3)), np.zeros((0, 3)), 1)
        with pytest.raises(DataError):
            nearest_neighbors(np.zeros((2, 3)), np.zeros((4, 3)), 5)


def test_unit_normalize_properties(rng):
    pts = rng.normal(size=(100, 3)) * np.array([3.0, 1.0, 0.5]) + 7.0
    out, norm = unit_normalize(pts)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    diag = np.linalg.norm(out.max(axis=0) - out.min(axis=0))
    assert abs(diag - 1.0) < 1e-12
    np.testing.assert_allclose(norm.to_original(out), pts, atol=1e-9)


def test_normalization_roundtrip():
    norm = Normalization(np.array([1.0, -2.0, 3.0]), 4.0)
    pts = np.array([[0.0, 0.0, 0.0], [0.25, 0.5, -0.25]])
    np.testing.assert_allclose(
        norm.to_original(pts), pts * 4.0 + np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(norm.to_normalized(norm.to_original(pts)), pts)


def test_vertex_normals_radial_on_sphere(sphere_mesh):
    normals, degenerate = compute_vertex_normals(sphere_mesh)
    assert degenerate == 0
    radial = sphere_mesh.vertices / np.linalg.norm(
        sphere_mesh.vertices, axis=1, keepdims=True)
    dots = np.einsum("ij,ij->i", normals, radial)
    assert dots.min() > 0.97
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)


class TestVoxelDownsample:
    def test_keypoints_are_voxel_centroids(self, rng):
        pts = rng.uniform(0, 1, size=(200, 3))
        size = 0.25
        keys = voxel_downsample(PointCloud(pts), size)
        assert isinstance(keys, KeypointSet)
        assert 1 <= len(keys.keypoints) <= len(pts)
        # brute-force reference: group points by voxel from the cloud minimum
        cells = np.floor((pts - pts.min(axis=0)) / size).astype(np.int64)
        groups = {}
        for i, c in enumerate(map(tuple, cells)):
            groups.setdefault(c, []).append(i)
        assert len(keys.keypoints) == len(groups)
        for i in range(len(pts)):
            k = keys.assignment[i]
            members = groups[tuple(cells[i])]
            np.testing.assert_allclose(
                keys.keypoints[k], pts[members].mean(axis=0), atol=1e-12)

    def test_deterministic(self, rng):
        pts = rng.uniform(0, 1, size=(150, 3))
        a = voxel_downsample(PointCloud(pts), 0.2)
        b = voxel_downsample(PointCloud(pts), 0.2)
        np.testing.assert_array_equal(a.keypoints, b.keypoints)


def test_tet_volumes_unit_tet():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    tets = np.array([[0, 1, 2, 3]])
    np.testing.assert_allclose(tet_volumes(verts, tets), [1.0 / 6.0])


def test_orient_tets_fixes_inverted(cube_tets):
    flipped = cube_tets.tets.copy()
    flipped[:, [0, 1]] = flipped[:, [1, 0]]
    fixed = orient_tets(cube_tets.vertices, flipped)
    assert np.all(tet_volumes(cube_tets.vertices, fixed) > 0)


def test_tetmesh_boundary_faces_closed(cube_tets):
    # boundary of a solid cube mesh: each boundary face appears exactly once
    faces = cube_tets.boundary_faces()
    canon = {tuple(sorted(f)) for f in faces}
    assert len(canon) == len(faces)
    # Euler characteristic of a ball's boundary (a sphere): V - E + F = 2
    vids = np.unique(faces.ravel())
    edges = {tuple(sorted(e)) for f in faces
             for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
    assert len(vids) - len(edges) + len(faces) == 2


def test_apply_rigid_moves_normals(rng):
    T = random_rigid(rng, 90.0, 1.0)
    pts = rng.normal(size=(20, 3))
    normals = rng.normal(size=(20, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = apply_rigid(PointCloud(pts, normals), T)
    np.testing.assert_allclose(out.points, T.apply(pts))
    np.testing.assert_allclose(out.normals, normals @ T.rotation.T)


def test_shape_validation():
    with pytest.raises(DataError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(DataError):
        TriMesh(np.zeros((4, 3)), np.array([[0, 1, 9]]))
    with pytest.raises(DataError):
        TetMesh(np.zeros((4, 3)), np.array([[0, 1, 2, 9]]))
