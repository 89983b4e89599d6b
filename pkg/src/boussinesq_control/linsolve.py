"""Per-step sparse linear solves.

Two kinds of systems arise: the nonsymmetric velocity/pressure saddle
problem with a scalar zero-mean pressure constraint, and the nonsymmetric
Robin heat system.  Both are solved with a sparse direct factorization
(SuperLU with COLAMD ordering), which is fast and deterministic at desk
scale; every solve verifies its residual against the requested tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "LinearSolverError",
    "LinearSolution",
    "SaddleSystem",
    "solve_sparse",
    "solve_saddle",
]

DEFAULT_TOL = 1e-10
DIV_RESIDUAL_TOL = 1e-9
MEAN_RESIDUAL_TOL = 1e-10


class LinearSolverError(RuntimeError):
    """Raised when a solve misses its residual contract."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class LinearSolution:
    x: np.ndarray
    residual: float


def solve_sparse(matrix: sp.spmatrix, rhs: np.ndarray,
                 tol: float = DEFAULT_TOL) -> LinearSolution:
    """Direct solve with relative-residual verification.

    The residual is ``||Ax - b|| / ||b||`` (absolute when ``b = 0``, in
    which case the factorization returns the exact zero vector).
    """
    A = sp.csc_matrix(matrix)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    lu = spla.splu(A)
    x = lu.solve(rhs)
    norm_b = np.linalg.norm(rhs)
    res = np.linalg.norm(A @ x - rhs)
    rel = res / norm_b if norm_b > 0 else res
    if not np.isfinite(rel) or rel > tol:
        raise LinearSolverError("sparse solve did not reach tolerance", rel)
    return LinearSolution(x, rel)


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """Velocity block ``A``, divergence block ``B`` and mean vector ``m``.

    The assembled augmented matrix is
    ``[[A, B^T, 0], [B, 0, m], [0, m^T, 0]]``; the scalar multiplier pins
    the pressure mean to zero without singling out a DOF, and at the
    solution it vanishes so the full divergence constraint holds.

    ``local_dofs`` optionally lists velocity unknowns whose mutual
    coupling block in ``A`` is diagonal (the element bubbles of the Mini
    pair).  Those unknowns are then eliminated exactly before the
    factorization, which shrinks the system by two thirds; the residual
    is always verified on the full uncondensed system.
    """

    A: sp.spmatrix
    B: sp.spmatrix
    m: np.ndarray
    local_dofs: np.ndarray | None = None

    def augmented(self) -> sp.csc_matrix:
        npr = self.B.shape[0]
        mcol = sp.csc_matrix(self.m.reshape(npr, 1))
        return sp.bmat([[self.A, self.B.T, None],
                        [self.B, None, mcol],
                        [None, mcol.T, None]], format="csc")


def solve_saddle(system: SaddleSystem, rhs_velocity: np.ndarray,
                 tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Solve the saddle problem for (velocity, zero-mean pressure).

    At the solution of the augmented system the scalar multiplier is zero
    (the column sums of ``B`` vanish for zero-trace velocities), so the
    solve factors an equivalent system whose border pins one pressure
    value - the dense mean-vector border slows the sparse factorization
    several-fold - and then shifts the pressure to its zero-mean
    representative exactly.  The residual is verified against the exact
    augmented system with multiplier zero, and the divergence and
    pressure-mean post-conditions are checked on top of it.
    """
    nvel = _check_dims(system, rhs_velocity)
    npr = system.B.shape[0]
    if system.local_dofs is None:
        y, p = _solve_pinned(system.A, system.B, rhs_velocity)
    else:
        y, p = _solve_condensed(system, rhs_velocity)
    total = float(_total_mass(system))
    p = p - (float(system.m @ p) / total)

    norm_b = np.linalg.norm(rhs_velocity)
    r_mom = system.A @ y + system.B.T @ p - rhs_velocity
    r_div = system.B @ y
    r_mean = float(system.m @ p)
    res = np.sqrt(np.dot(r_mom, r_mom) + np.dot(r_div, r_div) + r_mean ** 2)
    rel = res / norm_b if norm_b > 0 else res
    if not np.isfinite(rel) or rel > tol:
        raise LinearSolverError("saddle solve did not reach tolerance", rel)
    div_res = np.abs(r_div).max() if npr else 0.0
    if div_res > DIV_RESIDUAL_TOL * max(norm_b, 1e-30) and div_res > 1e-14:
        raise LinearSolverError("velocity not discretely divergence-free",
                                div_res)
    mean_res = abs(r_mean)
    if mean_res > MEAN_RESIDUAL_TOL * max(norm_b, 1.0):
        raise LinearSolverError("pressure mean constraint violated", mean_res)
    return y, p


def _solve_pinned(A: sp.spmatrix, B: sp.spmatrix, rhs_velocity: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Factor the saddle system with a sparse single-value pressure border.

    The dense mean-vector border slows the sparse factorization several-
    fold, and the multiplier vanishes identically anyway (column sums of
    ``B`` are zero for zero-trace velocities); the zero-mean pressure
    representative is recovered by an exact constant shift afterwards.
    """
    nvel = A.shape[0]
    npr = B.shape[0]
    pin = sp.csc_matrix((np.array([1.0]), (np.array([0]), np.array([0]))),
                        shape=(npr, 1))
    pinned = sp.bmat([[A, B.T, None],
                      [B, None, pin],
                      [None, pin.T, None]], format="csc")
    rhs = np.zeros(nvel + npr + 1)
    rhs[:nvel] = rhs_velocity
    x = spla.splu(pinned).solve(rhs)
    return x[:nvel], x[nvel:nvel + npr]


def _solve_condensed(system: SaddleSystem, rhs_velocity: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the diagonal-coupled local unknowns, solve, recover them."""
    A = sp.csr_matrix(system.A)
    B = sp.csr_matrix(system.B)
    nvel = A.shape[0]
    keep = np.ones(nvel, dtype=bool)
    keep[system.local_dofs] = False
    vp = np.nonzero(keep)[0]
    bp = system.local_dofs
    d = A.diagonal()[bp]
    inv_d = sp.diags(1.0 / d)
    A_rows_v = A[vp]
    A_rows_b = A[bp]
    A_vv = A_rows_v[:, vp]
    A_vb = A_rows_v[:, bp]
    A_bv = A_rows_b[:, vp]
    B_v = B[:, vp]
    B_b = B[:, bp]
    f_v = rhs_velocity[vp]
    f_b = rhs_velocity[bp]

    C = (A_vb @ inv_d).tocsr()
    E = (B_b @ inv_d).tocsr()
    A_c = A_vv - C @ A_bv
    BT_c = B_v.T - C @ B_b.T
    B_c = B_v - E @ A_bv
    S_pp = -(E @ B_b.T)
    rhs_v = f_v - C @ f_b
    rhs_p = -(E @ f_b)

    npr = B.shape[0]
    pin = sp.csc_matrix((np.array([1.0]), (np.array([0]), np.array([0]))),
                        shape=(npr, 1))
    aug = sp.bmat([[A_c, BT_c, None],
                   [B_c, S_pp, pin],
                   [None, pin.T, None]], format="csc")
    rhs = np.concatenate([rhs_v, rhs_p, [0.0]])
    x = spla.splu(aug).solve(rhs)
    y_v = x[:len(vp)]
    p = x[len(vp):len(vp) + npr]
    y_b = (f_b - A_bv @ y_v - B_b.T @ p) / d
    y = np.empty(nvel)
    y[vp] = y_v
    y[bp] = y_b
    return y, p


def _total_mass(system: SaddleSystem) -> float:
    total = float(system.m.sum())
    if total == 0.0:
        raise ValueError("mean vector must have nonzero total mass")
    return total


def _check_dims(system: SaddleSystem, rhs_velocity: np.ndarray) -> int:
    nvel = system.A.shape[0]
    if system.A.shape[1] != nvel:
        raise ValueError("velocity block must be square")
    if system.B.shape[1] != nvel:
        raise ValueError("divergence block has incompatible column count")
    if system.m.shape != (system.B.shape[0],):
        raise ValueError("mean vector length must match pressure DOF count")
    if rhs_velocity.shape != (nvel,):
        raise ValueError("velocity right-hand side has wrong length")
    return nvel
