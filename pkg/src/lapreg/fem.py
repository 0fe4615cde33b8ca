"""Linear tetrahedral elasticity: element and global stiffness assembly.

Constant-strain tetrahedra with engineering (Voigt) strain ordering
(xx, yy, zz, xy, yz, zx).  The global matrix is symmetric positive
semidefinite with rigid translations in its nullspace; assembly order is
canonicalized so entry values do not depend on element order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .geometry import TetMesh


@dataclass
class MaterialParams:
    young_modulus: float = 1500.0
    poisson_ratio: float = 0.45

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise DataError("Young's modulus must be > 0")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise DataError(
                f"Poisson ratio must lie in (-1, 0.5), got {self.poisson_ratio}"
            )

    def elasticity_matrix(self) -> np.ndarray:
        """6x6 isotropic constitutive matrix for engineering strain."""
        E, nu = self.young_modulus, self.poisson_ratio
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = E / (2.0 * (1.0 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] = lam + 2.0 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


@dataclass
class StiffnessMatrix:
    matrix: sp.csr_matrix
    num_vertices: int
    num_tets: int
    material: MaterialParams

    @property
    def shape(self):
        return self.matrix.shape

    def diagonal(self):
        return self.matrix.diagonal()


def _shape_gradients(tet_pts: np.ndarray):
    """Gradients of the 4 linear shape functions and the signed volume."""
    E = (tet_pts[1:] - tet_pts[0]).T  # columns are edge vectors
    vol = float(np.linalg.det(E)) / 6.0
    if vol <= 0:
        raise DataError(f"tetrahedron has non-positive volume {vol}")
    inv = np.linalg.inv(E)
    grads = np.vstack([-inv.sum(axis=0), inv])  # (4, 3), row per node
    return grads, vol


def _strain_matrix(grads: np.ndarray) -> np.ndarray:
    B = np.zeros((6, 12))
    for a in range(4):
        gx, gy, gz = grads[a]
        c = 3 * a
        B[0, c] = gx
        B[1, c + 1] = gy
        B[2, c + 2] = gz
        B[3, c] = gy
        B[3, c + 1] = gx
        B[4, c + 1] = gz
        B[4, c + 2] = gy
        B[5, c] = gz
        B[5, c + 2] = gx
    return B


def element_stiffness(tet_pts: np.ndarray, material: MaterialParams) -> np.ndarray:
    """12x12 element matrix K_e = V * B^T D B."""
    tet_pts = np.asarray(tet_pts, dtype=np.float64).reshape(4, 3)
    grads, vol = _shape_gradients(tet_pts)
    B = _strain_matrix(grads)
    D = material.elasticity_matrix()
    return vol * (B.T @ D @ B)


def assemble_stiffness(mesh: TetMesh, material: MaterialParams) -> StiffnessMatrix:
    """Scatter-add element matrices into the sparse global 3M x 3M operator."""
    V, T = mesh.vertices, mesh.tets
    nt = len(T)
    edges = V[T[:, 1:]] - V[T[:, :1]]              # (nt, 3, 3) rows are edges
    E = np.swapaxes(edges, 1, 2)                   # columns are edges
    vols = np.linalg.det(E) / 6.0
    bad = np.flatnonzero(vols <= 0)
    if len(bad):
        shown = ", ".join(str(int(b)) for b in bad[:5])
        raise DataError(
            f"{len(bad)} tetrahedra have non-positive volume (first: {shown})"
        )
    inv = np.linalg.inv(E)                         # (nt, 3, 3)
    grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)  # (nt,4,3)

    B = np.zeros((nt, 6, 12))
    for a in range(4):
        gx, gy, gz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        B[:, 0, c] = gx
        B[:, 1, c + 1] = gy
        B[:, 2, c + 2] = gz
        B[:, 3, c] = gy
        B[:, 3, c + 1] = gx
        B[:, 4, c + 1] = gz
        B[:, 4, c + 2] = gy
        B[:, 5, c] = gz
        B[:, 5, c + 2] = gx
    D = material.elasticity_matrix()
    K = np.einsum("tia,ij,tjb->tab", B, D, B) * vols[:, None, None]  # (nt,12,12)

    dof = (3 * T[:, :, None] + np.arange(3)[None, None, :]).reshape(nt, 12)
    rows = np.repeat(dof, 12, axis=1).ravel()
    cols = np.tile(dof, (1, 12)).ravel()
    vals = K.ravel()

    # canonical summation order: element order must not change the entries
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    key = rows * (3 * mesh.num_vertices) + cols
    uniq, start = np.unique(key, return_index=True)
    sums = np.add.reduceat(vals, start)
    S = sp.csr_matrix(
        (sums, (uniq // (3 * mesh.num_vertices), uniq % (3 * mesh.num_vertices))),
        shape=(3 * mesh.num_vertices, 3 * mesh.num_vertices),
    )
    return StiffnessMatrix(S, mesh.num_vertices, nt, material)
