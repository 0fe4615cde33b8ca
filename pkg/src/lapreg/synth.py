"""Synthetic organ meshes and ready-to-run patient bundles.

Everything here is procedurally generated and seeded, so the package needs
no bundled data files: a bumpy star-shaped blob stands in for a liver
surface, and a lattice tetrahedralization of the same kind of blob (with
its boundary projected onto the smooth implicit surface) provides the
volumetric model whose boundary triangles form the matching surface mesh.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import TetMesh, TriMesh, orient_tets, tet_volumes
from .meshio import save_mesh_ply, save_tet

_STRETCH = np.array([1.0, 0.78, 0.62])
_SCALE_MM = 60.0


class RadialBlob:
    """Star-shaped radial field r(direction) = 1 + sum of spherical bumps."""

    def __init__(self, seed: int, num_bumps: int = 8, max_amp: float = 0.22,
                 width_range=(0.35, 0.8)):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(num_bumps, 3))
        self.centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        self.amps = rng.uniform(-max_amp, max_amp, num_bumps)
        self.widths = rng.uniform(width_range[0], width_range[1], num_bumps)

    def radius(self, directions: np.ndarray) -> np.ndarray:
        d = np.asarray(directions, dtype=np.float64)
        dots = d @ self.centers.T
        bumps = self.amps * np.exp((dots - 1.0) / self.widths**2)
        return 1.0 + bumps.sum(axis=1)


def icosphere(subdivisions: int) -> TriMesh:
    """Geodesic sphere: icosahedron subdivided with vertices on the unit sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    V = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    F = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        pair = np.stack([
            F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]],
        ], axis=1).reshape(-1, 2)
        key = np.sort(pair, axis=1)
        edges, inv = np.unique(key, axis=0, return_inverse=True)
        mids = V[edges[:, 0]] + V[edges[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        mid_idx = len(V) + inv.reshape(-1, 3)  # per face: [m01, m12, m20]
        V = np.vstack([V, mids])
        a, b, c = F[:, 0], F[:, 1], F[:, 2]
        m01, m12, m20 = mid_idx[:, 0], mid_idx[:, 1], mid_idx[:, 2]
        F = np.concatenate([
            np.stack([a, m01, m20], axis=1),
            np.stack([b, m12, m01], axis=1),
            np.stack([c, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ])
    return TriMesh(V, F)


def uv_sphere(rings: int, segments: int) -> TriMesh:
    """Latitude/longitude sphere with pole fans; rings*segments + 2 vertices."""
    polar = np.linspace(0.0, np.pi, rings + 2)[1:-1]
    azimuth = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    P, A = np.meshgrid(polar, azimuth, indexing="ij")
    V = np.stack([
        np.sin(P) * np.cos(A), np.sin(P) * np.sin(A), np.cos(P)
    ], axis=-1).reshape(-1, 3)
    top = len(V)
    bottom = top + 1
    V = np.vstack([V, [[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]]])

    def vid(r, s):
        return r * segments + (s % segments)

    faces = []
    for s in range(segments):
        faces.append([top, vid(0, s), vid(0, s + 1)])
        faces.append([bottom, vid(rings - 1, s + 1), vid(rings - 1, s)])
    for r in range(rings - 1):
        for s in range(segments):
            faces.append([vid(r, s), vid(r + 1, s), vid(r + 1, s + 1)])
            faces.append([vid(r, s), vid(r + 1, s + 1), vid(r, s + 1)])
    return TriMesh(V, np.asarray(faces, dtype=np.int64))


def _apply_blob(mesh: TriMesh, blob: RadialBlob) -> TriMesh:
    d = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    V = d * blob.radius(d)[:, None] * _STRETCH * _SCALE_MM
    return TriMesh(V, mesh.faces)


def organ_surface(seed: int = 7, subdivisions: int = 5) -> TriMesh:
    """Liver-like closed surface; subdivisions=5 gives 10242 vertices."""
    return _apply_blob(icosphere(subdivisions), RadialBlob(seed))


def organ_surface_large(seed: int = 7, rings: int = 199,
                        segments: int = 251) -> TriMesh:
    """Same blob family at ~50k vertices (throughput-scale surface)."""
    return _apply_blob(uv_sphere(rings, segments), RadialBlob(seed))


def organ_tet(seed: int = 11, target_tets: int = 12000,
              smooth_iters: int = 4):
    """Lattice tet blob; returns (TetMesh, surface TriMesh, surface->tet map).

    Cubes whose centers fall inside the blob are split into 6 tets; the
    boundary vertices are then pulled onto the smooth implicit surface
    (step size bisected globally so every tet keeps positive volume) and
    the mesh is relaxed a few times.  The returned surface mesh is exactly
    the boundary triangulation, so its vertices coincide with tet-mesh
    vertices; the map gives each surface vertex's tet vertex index.
    """
    blob = RadialBlob(seed)
    h = (6.0 * (4.0 / 3.0) * np.pi / target_tets) ** (1.0 / 3.0)
    span = 1.35
    ncell = int(np.ceil(2.0 * span / h))
    coords = -span + h * np.arange(ncell + 1)
    cx, cy, cz = np.meshgrid(
        coords[:-1] + h / 2, coords[:-1] + h / 2, coords[:-1] + h / 2,
        indexing="ij",
    )
    centers = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    rad = np.linalg.norm(centers, axis=1)
    d = centers / np.maximum(rad, 1e-12)[:, None]
    keep = rad <= blob.radius(d)
    cells = np.stack(np.unravel_index(np.flatnonzero(keep),
                                      (ncell, ncell, ncell)), axis=1)

    # global node ids on the (ncell+1)^3 grid
    def node_id(ijk):
        return (ijk[:, 0] * (ncell + 1) + ijk[:, 1]) * (ncell + 1) + ijk[:, 2]

    offsets = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    corner_ids = np.stack([node_id(cells + off) for off in offsets], axis=1)
    used, inv = np.unique(corner_ids.ravel(), return_inverse=True)
    corner_local = inv.reshape(corner_ids.shape)
    gi = used // ((ncell + 1) ** 2)
    gj = (used // (ncell + 1)) % (ncell + 1)
    gk = used % (ncell + 1)
    V = np.stack([coords[gi], coords[gj], coords[gk]], axis=1)

    # six tets around the main diagonal c000-c111 (corner bit order x,y,z)
    c = corner_local
    diag_tets = [(0, 1, 5, 7), (0, 5, 4, 7), (0, 4, 6, 7),
                 (0, 6, 2, 7), (0, 2, 3, 7), (0, 3, 1, 7)]
    T = np.concatenate([
        np.stack([c[:, a], c[:, b], c[:, cc], c[:, dd]], axis=1)
        for a, b, cc, dd in diag_tets
    ])
    T = orient_tets(V, T)

    boundary = TetMesh(V, T).boundary_faces()
    b_idx = np.unique(boundary.ravel())

    def project_boundary(P):
        target = P.copy()
        bp = P[b_idx]
        n = np.linalg.norm(bp, axis=1)
        dirs = bp / np.maximum(n, 1e-12)[:, None]
        target[b_idx] = dirs * blob.radius(dirs)[:, None]
        return target

    def safe_blend(P, target):
        beta = 1.0
        for _ in range(12):
            Q = P + beta * (target - P)
            if tet_volumes(Q, T).min() > 1e-12:
                return Q
            beta *= 0.5
        return P

    V = safe_blend(V, project_boundary(V))
    # neighbor-average relaxation with boundary re-projection
    edges = np.concatenate([T[:, [0, 1]], T[:, [0, 2]], T[:, [0, 3]],
                            T[:, [1, 2]], T[:, [1, 3]], T[:, [2, 3]]])
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    for _ in range(smooth_iters):
        acc = np.zeros_like(V)
        np.add.at(acc, i, V[j])
        cnt = np.bincount(i, minlength=len(V)).astype(np.float64)
        avg = acc / np.maximum(cnt, 1.0)[:, None]
        V = safe_blend(V, project_boundary(0.5 * (V + avg)))

    V = V * _STRETCH * _SCALE_MM
    tet_mesh = TetMesh(V, orient_tets(V, T))
    boundary = tet_mesh.boundary_faces()
    surf_idx = np.unique(boundary.ravel())
    remap = np.full(len(V), -1, dtype=np.int64)
    remap[surf_idx] = np.arange(len(surf_idx))
    surface = TriMesh(V[surf_idx], remap[boundary])
    return tet_mesh, surface, surf_idx


def _cap_indices(vertices: np.ndarray, direction, min_dot: float) -> np.ndarray:
    """Vertices whose direction from the centroid aligns with `direction`."""
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    rel = vertices - vertices.mean(axis=0)
    rel /= np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-12)
    return np.flatnonzero(rel @ d > min_dot)


def write_patient(out_dir, kind: str = "matching", seed: int = 7) -> Path:
    """Write a complete patient bundle (meshes + TOML config); returns the
    config path.  Kinds: matching (10k surface), registration (12k-tet
    volume + boundary surface), throughput (~50k surface).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["schema_version = 1", f'name = "{kind}"', ""]
    if kind == "matching":
        surface = organ_surface(seed=seed)
        save_mesh_ply(out / "surface.ply", surface)
        lobe = _cap_indices(surface.vertices, (0.85, 0.4, 0.2), 0.55)
        (out / "lobe.json").write_text(json.dumps([int(v) for v in lobe]))
        lines += [
            "[paths]",
            'surface_mesh = "surface.ply"',
            'lobe_labels = "lobe.json"',
            "",
            "[rigid]",
            "max_angle = 30.0",
            "max_translation = 0.1",
        ]
    elif kind == "registration":
        tet_mesh, surface, _ = organ_tet(seed=seed + 4)
        save_tet(out / "volume.tet", tet_mesh)
        save_mesh_ply(out / "surface.ply", surface)
        # Dent seeds confined to a tight polar cap so the visible patch
        # always encloses the dent with a ring of resting surface; without
        # that ring, matches carry no evidence that the rest of the organ
        # stayed put and the elastic solve drags the hidden side.
        seeds = _cap_indices(surface.vertices, (0.0, 0.0, 1.0), 0.85)
        (out / "seeds.json").write_text(json.dumps([int(v) for v in seeds]))
        lines += [
            "[paths]",
            'surface_mesh = "surface.ply"',
            'tet_mesh = "volume.tet"',
            "",
            "[crop]",
            "keep_fraction = 0.25",
            "polar_range = [2.0, 12.0]",
            "azimuth_range = [-40.0, 40.0]",
            "",
            "[deform]",
            'types = ["compression"]',
            "compression_max = 0.04",
            "handle_fraction = 0.05",
            "anchor_fraction = 0.5",
            'seed_region = "seeds.json"',
            "",
            # Initial pose error dominates the unregistered TRE, as it does
            # when a preoperative model is first dropped into the scene.
            "[rigid]",
            "max_angle = 12.0",
            "max_translation = 0.05",
        ]
    elif kind == "throughput":
        surface = organ_surface_large(seed=seed)
        save_mesh_ply(out / "surface.ply", surface)
        lines += [
            "[paths]",
            'surface_mesh = "surface.ply"',
            "",
            "[deform]",
            'types = ["compression"]',
            # iteration budget trimmed: the local-global loop is within 1% of
            # its converged energy after six rounds on meshes this dense
            "max_iterations = 6",
            "",
            "[rigid]",
            "max_angle = 30.0",
            "max_translation = 0.1",
        ]
    else:
        raise ValueError(f"unknown patient kind '{kind}'")
    config = out / "patient.toml"
    config.write_text("\n".join(lines) + "\n")
    return config
