"""Shared small meshes and fixtures.

Unit tests run on tiny analytic shapes; the heavyweight synthetic patients
are session-scoped and only built by the tests that need them.
"""
import numpy as np
import pytest
from scipy.spatial import Delaunay

from lapreg.geometry import TetMesh, TriMesh, orient_tets


def make_icosphere(subdiv: int = 2, radius: float = 1.0) -> TriMesh:
    """Icosahedron subdivided `subdiv` times, vertices on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdiv):
        edge_mid = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)


def make_grid_tets(n: int = 3, jitter: float = 0.04, seed: int = 0) -> TetMesh:
    """Delaunay tetrahedralization of a jittered n^3 grid on the unit cube.

    The jitter keeps Delaunay away from the co-spherical degeneracies of a
    perfect grid, which would otherwise produce zero-volume slivers.
    """
    axis = np.linspace(0.0, 1.0, n)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    pts = pts.reshape(-1, 3)
    rng = np.random.default_rng(seed)
    pts = pts + rng.uniform(-jitter, jitter, pts.shape)
    tets = Delaunay(pts).simplices.astype(np.int64)
    return TetMesh(pts, orient_tets(pts, tets))


@pytest.fixture(scope="session")
def sphere_mesh():
    return make_icosphere(subdiv=2)


@pytest.fixture(scope="session")
def dense_sphere_mesh():
    return make_icosphere(subdiv=3)


@pytest.fixture(scope="session")
def cube_tets():
    return make_grid_tets(3)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
