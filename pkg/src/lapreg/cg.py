"""Preconditioned conjugate gradients for symmetric positive definite systems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError


@dataclass
class CgResult:
    solution: np.ndarray
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def conjugate_gradient(A, b, tol=1e-8, max_iterations=None, preconditioner=None,
                       x0=None):
    """Solve A x = b for symmetric positive definite A.

    A may be a dense/sparse matrix or a callable v -> A @ v.
    `preconditioner`, if given, is the diagonal of a Jacobi preconditioner
    (entries must be > 0).  Convergence is relative: ||r|| <= tol * ||b||.
    A direction with p^T A p <= 0 means A is not positive definite and
    raises SolverError; running out of iterations just reports
    converged=False.
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    n = b.size
    apply_A = A if callable(A) else (lambda v: A @ v)
    if max_iterations is None:
        max_iterations = 10 * n
    if max_iterations < 1:
        raise SolverError("max_iterations must be >= 1")

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CgResult(np.zeros(n), [0.0], True, 0)

    inv_m = None
    if preconditioner is not None:
        diag = np.asarray(preconditioner, dtype=np.float64).ravel()
        if diag.size != n:
            raise SolverError("preconditioner diagonal has wrong length")
        if np.any(diag <= 0):
            raise SolverError("preconditioner diagonal must be positive")
        inv_m = 1.0 / diag

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - apply_A(x) if x0 is not None else b.copy()
    z = inv_m * r if inv_m is not None else r
    p = z.copy()
    rz = float(r @ z)
    norms = [float(np.linalg.norm(r))]
    if norms[0] <= tol * b_norm:
        return CgResult(x, norms, True, 0)

    for k in range(1, max_iterations + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError(
                f"matrix is not positive definite (p^T A p = {pAp} at iteration {k})"
            )
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rn = float(np.linalg.norm(r))
        norms.append(rn)
        if rn <= tol * b_norm:
            return CgResult(x, norms, True, k)
        z = inv_m * r if inv_m is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    return CgResult(x, norms, False, max_iterations)
