"""Correspondence-constrained elastic registration.

Minimizes  0.5 * dX' S dX + k * ||targets - (rest_m + dX_m)||^2  over the
displacement field dX, where S is the assembled stiffness operator and the
subscript m selects matched vertices.  Stationarity gives the SPD system

    (S + 2k P'P) dX = 2k P' (targets - rest_m)

solved by Jacobi-preconditioned conjugate gradients.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cg import conjugate_gradient
from .errors import DataError
from .fem import MaterialParams, StiffnessMatrix, assemble_stiffness
from .geometry import RigidTransform, TetMesh, best_fit_rigid, nearest_neighbors
from .matching import CorrespondenceSet


@dataclass
class CgOptions:
    tolerance: float = 1e-8
    max_iterations: int | None = None  # None -> 10 * (3 * num_vertices)
    preconditioner: str = "jacobi"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise DataError("cg tolerance must be > 0")
        if self.preconditioner not in ("jacobi", "none"):
            raise DataError(f"unknown preconditioner '{self.preconditioner}'")


@dataclass
class RegistrationProblem:
    stiffness: StiffnessMatrix
    rest_positions: np.ndarray
    matches: CorrespondenceSet      # pairs (vertex index, row into targets)
    targets: np.ndarray
    k: float | None = None          # None -> 10 * mean diagonal of S
    substeps: int = 1
    cg: CgOptions = field(default_factory=CgOptions)

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        n = len(self.rest_positions)
        if self.stiffness.num_vertices != n:
            raise DataError("stiffness size does not match rest positions")
        if len(self.matches) < 1:
            raise DataError("fewer than 1 match")
        pairs = self.matches.pairs
        if pairs[:, 0].max() >= n or pairs[:, 1].max() >= len(self.targets):
            raise DataError("match indices out of range")
        if self.k is not None and self.k <= 0:
            raise DataError("k must be > 0")
        if self.substeps < 1:
            raise DataError("substeps must be >= 1")


@dataclass
class DisplacementField:
    displacement: np.ndarray        # (M, 3)
    residual_norms: list
    converged: bool = True
    iterations: int = 0
    energy_before: float = 0.0
    energy_after: float = 0.0
    k_used: float = 0.0

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=np.float64)
        if not np.all(np.isfinite(self.displacement)):
            raise DataError("displacement field contains non-finite values")


def snap_matches(points, targets, tet_vertices):
    """Snap dense-point matches onto the nearest tet vertices.

    Multiple matches landing on one vertex are merged by averaging their
    target positions.  Returns a CorrespondenceSet whose pairs map tet
    vertex index -> row of the merged target array, plus that array.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(targets):
        raise DataError("points and targets must pair up")
    if len(points) == 0:
        raise DataError("fewer than 1 match")
    idx, _ = nearest_neighbors(points, np.asarray(tet_vertices, dtype=np.float64), 1)
    uniq, inverse = np.unique(idx[:, 0], return_inverse=True)
    merged = np.zeros((len(uniq), 3))
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    for c in range(3):
        merged[:, c] = np.bincount(inverse, weights=targets[:, c],
                                   minlength=len(uniq)) / counts
    pairs = np.stack([uniq, np.arange(len(uniq))], axis=1)
    cs = CorrespondenceSet(pairs=pairs, confidence=np.ones(len(uniq)))
    return cs, merged


def _check_match_spread(positions):
    if len(positions) < 3:
        warnings.warn("fewer than 3 matched vertices; rigid modes are "
                      "weakly constrained", stacklevel=3)
        return
    centered = positions - positions.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        warnings.warn("matched vertices are collinear; rigid modes are "
                      "weakly constrained", stacklevel=3)


def solve_registration(problem: RegistrationProblem):
    """Solve the registration problem; returns (DisplacementField, registered).

    With substeps > 1 the targets are moved toward their final positions in
    equal increments, re-solving (warm-started) at each step.  CG
    non-convergence is reported via the converged flag, not raised.
    """
    S = problem.stiffness.matrix
    rest = problem.rest_positions
    n = len(rest)
    vidx = problem.matches.pairs[:, 0]
    tgt = problem.targets[problem.matches.pairs[:, 1]]
    rest_m = rest[vidx]
    _check_match_spread(rest_m)

    k = problem.k
    if k is None:
        k = 10.0 * float(problem.stiffness.diagonal().mean())
    mask = np.zeros(3 * n)
    dof = (3 * vidx[:, None] + np.arange(3)).ravel()
    mask[dof] = 1.0

    def apply_A(v):
        return S @ v + (2.0 * k) * (mask * v)

    precond = None
    if problem.cg.preconditioner == "jacobi":
        precond = problem.stiffness.diagonal() + 2.0 * k * mask
    max_it = problem.cg.max_iterations
    if max_it is None:
        max_it = 10 * 3 * n

    d_full = tgt - rest_m
    energy_before = k * float(np.sum(d_full ** 2))

    u = np.zeros(3 * n)
    norms = []
    converged = True
    total_it = 0
    eta = problem.substeps
    for s in range(1, eta + 1):
        d_s = (s / eta) * d_full
        rhs = np.zeros(3 * n)
        rhs[dof] = (2.0 * k) * d_s.ravel()
        res = conjugate_gradient(apply_A, rhs, tol=problem.cg.tolerance,
                                 max_iterations=max_it, preconditioner=precond,
                                 x0=u if s > 1 else None)
        u = res.solution
        norms = res.residual_norms
        converged = converged and res.converged
        total_it += res.iterations

    disp = u.reshape(n, 3)
    u_m = disp[vidx]
    energy_after = 0.5 * float(u @ (S @ u)) + k * float(np.sum((d_full - u_m) ** 2))
    fld = DisplacementField(disp, norms, converged, total_it,
                            energy_before, energy_after, k)
    return fld, rest + disp


@dataclass
class RegistrationOutcome:
    field: DisplacementField
    registered: np.ndarray          # tet vertices in the deformed frame
    prealign: RigidTransform
    snapped: CorrespondenceSet
    snapped_targets: np.ndarray
    substeps: int

    def solve_report(self) -> dict:
        f = self.field
        return {
            "converged": bool(f.converged),
            "iterations": int(f.iterations),
            "residual_norms": [float(r) for r in f.residual_norms],
            "energy_before": float(f.energy_before),
            "energy_after": float(f.energy_after),
            "k": float(f.k_used),
            "substeps": int(self.substeps),
            "num_snapped_matches": int(len(self.snapped)),
        }


def register_sample(sample, matches: CorrespondenceSet, tet_mesh: TetMesh,
                    material: MaterialParams | None = None, k=None, substeps=1,
                    prealign=True, cg: CgOptions | None = None) -> RegistrationOutcome:
    """Register the volumetric model to a sample's partial cloud via matches.

    Matched rows of the complete cloud are mapped back to the model frame
    (the complete cloud is a rigidly perturbed copy of the model surface),
    optionally pre-aligned to the targets with a best-fit rigid transform,
    snapped onto tet vertices, and fed to the elastic solve.  The returned
    positions live in the partial cloud's frame.
    """
    if material is None:
        material = MaterialParams()
    if len(matches) < 1:
        raise DataError("fewer than 1 match")
    pairs = matches.pairs
    inv = sample.rigid.inverse()
    src_model = inv.apply(sample.complete.points[pairs[:, 0]])
    tgt = sample.partial.points[pairs[:, 1]]

    pre = best_fit_rigid(src_model, tgt) if prealign else RigidTransform.identity()
    rest = pre.apply(tet_mesh.vertices)
    src_pre = pre.apply(src_model)

    snapped, merged = snap_matches(src_pre, tgt, rest)
    stiff = assemble_stiffness(TetMesh(rest, tet_mesh.tets), material)
    problem = RegistrationProblem(stiff, rest, snapped, merged, k=k,
                                  substeps=substeps,
                                  cg=cg if cg is not None else CgOptions())
    fld, registered = solve_registration(problem)
    return RegistrationOutcome(fld, registered, pre, snapped, merged, substeps)


def surface_positions_from_registration(surface_points, tet_mesh: TetMesh,
                                        outcome: RegistrationOutcome) -> np.ndarray:
    """Carry the volumetric registration onto surface points.

    Each surface point rides with its nearest tet vertex (the patient
    surfaces here coincide with the tet boundary, so the offset is zero).
    """
    pts = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    idx, _ = nearest_neighbors(pts, tet_mesh.vertices, 1)
    idx = idx[:, 0]
    offset = pts - tet_mesh.vertices[idx]
    rotated = offset @ outcome.prealign.rotation.T
    return outcome.registered[idx] + rotated
