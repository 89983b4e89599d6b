"""Finite-element spaces on structured triangle meshes.

Three spaces are provided: the Mini velocity pair component space
(P1 plus one cubic bubble per triangle, two components), P1 pressure and
P1 temperature.  The module owns reference bases, quadrature rules, DOF
maps, boundary trace indices and L2 projection; the sparse operators
built on top of these live in :mod:`boussinesq_control.assembly`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .mesh import Mesh

__all__ = [
    "SpaceKind",
    "FunctionSpace",
    "FEField",
    "QuadratureRule",
    "build_space",
    "quadrature_rule",
    "edge_quadrature",
    "l2_project",
    "evaluate_field",
]

MAX_QUADRATURE_DEGREE = 8
DEFAULT_CELL_DEGREE = 8  # exact for every Mini/P1 cell integral used here
BUBBLE_SCALE = 27.0  # bubble = 27*l1*l2*l3, value 1 at the barycenter


class SpaceKind(Enum):
    VELOCITY_MINI = "velocity_mini"
    PRESSURE_P1 = "pressure_p1"
    SCALAR_P1 = "scalar_p1"


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle {x,y >= 0, x+y <= 1}.

    ``points`` are barycentric coordinates, ``weights`` sum to the
    reference area 1/2 and the rule is exact for total degree <= ``degree``.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def num_points(self) -> int:
        return self.weights.shape[0]

    @property
    def xy(self) -> np.ndarray:
        """Cartesian reference coordinates, shape (nq, 2)."""
        return self.points[:, 1:]


def quadrature_rule(exactness_degree: int) -> QuadratureRule:
    """Collapsed (Duffy) Gauss rule exact to the requested total degree."""
    if not 0 <= exactness_degree <= MAX_QUADRATURE_DEGREE:
        raise ValueError(
            f"unsupported quadrature degree {exactness_degree}; "
            f"supported range is 0..{MAX_QUADRATURE_DEGREE}")
    # x = u, y = v*(1-u), Jacobian (1-u): u-degree grows by one
    m = (exactness_degree + 2 + 1) // 2
    gu, gw = np.polynomial.legendre.leggauss(m)
    u = 0.5 * (gu + 1.0)
    w = 0.5 * gw
    uu, vv = np.meshgrid(u, u, indexing="ij")
    ww = np.outer(w, w) * (1.0 - uu)
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    weights = ww.ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(points, weights, exactness_degree)


def edge_quadrature(num_points: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1] for boundary edge integrals."""
    g, w = np.polynomial.legendre.leggauss(num_points)
    return 0.5 * (g + 1.0), 0.5 * w


def _hat_gradients(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Physical gradients of the P1 hats: (nt, 3, 2) array, plus areas."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    areas = 0.5 * det
    grads = np.empty((mesh.num_triangles, 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return grads, areas


class FunctionSpace:
    """Global DOF bookkeeping for one space kind on one mesh.

    Velocity DOFs are component-contiguous: component ``c`` occupies the
    range ``[c*(nv+nt), (c+1)*(nv+nt))`` with vertex DOFs first and one
    bubble DOF per triangle after them.
    """

    def __init__(self, mesh: Mesh, kind: SpaceKind):
        self.mesh = mesh
        self.kind = kind
        nv = mesh.num_vertices
        nt = mesh.num_triangles
        if kind is SpaceKind.VELOCITY_MINI:
            self.ncomp_dof = nv + nt
            self.ndof = 2 * self.ncomp_dof
            comp = np.hstack([mesh.triangles, nv + np.arange(nt)[:, None]])
            self.component_dofs = comp  # (nt, 4): three hats + bubble
            self.element_dofs = np.hstack([comp, comp + self.ncomp_dof])
            bdry = mesh.boundary_vertices()
            self.dirichlet_dofs = np.concatenate([bdry, bdry + self.ncomp_dof])
            mask = np.ones(self.ndof, dtype=bool)
            mask[self.dirichlet_dofs] = False
            self.free_dofs = np.nonzero(mask)[0]
            self.boundary_dofs = None
        else:
            self.ncomp_dof = nv
            self.ndof = nv
            self.component_dofs = mesh.triangles
            self.element_dofs = mesh.triangles
            self.boundary_dofs = mesh.boundary_vertices()
            self.dirichlet_dofs = None
            self.free_dofs = np.arange(nv)
        self.hat_grads, self.areas = _hat_gradients(mesh)
        self.local_size = self.element_dofs.shape[1]
        self._tables: dict[int, tuple] = {}

    @property
    def num_local_scalar(self) -> int:
        """Scalar basis functions per element (4 for Mini, 3 for P1)."""
        return 4 if self.kind is SpaceKind.VELOCITY_MINI else 3

    def basis_tables(self, rule: QuadratureRule):
        """Reference values and physical gradients at quadrature points.

        Returns ``(vals, grads, wdet, phys_pts)`` with shapes
        ``(nloc, nq)``, ``(nt, nloc, nq, 2)``, ``(nt, nq)`` and
        ``(nt, nq, 2)``; ``wdet`` carries weight times twice the area so a
        plain contraction over q yields the physical integral.  Tables are
        cached per quadrature degree.
        """
        key = rule.degree
        if key in self._tables:
            return self._tables[key]
        mesh = self.mesh
        lam = rule.points  # (nq, 3)
        nq = rule.num_points
        nloc = self.num_local_scalar
        nt = mesh.num_triangles

        vals = np.empty((nloc, nq))
        vals[:3] = lam.T
        grads = np.empty((nt, nloc, nq, 2))
        grads[:, :3] = self.hat_grads[:, :, None, :]
        if nloc == 4:
            vals[3] = BUBBLE_SCALE * lam[:, 0] * lam[:, 1] * lam[:, 2]
            # grad bubble = 27 * sum_a (prod of other lambdas) grad(hat_a)
            cof = np.empty((3, nq))
            cof[0] = lam[:, 1] * lam[:, 2]
            cof[1] = lam[:, 0] * lam[:, 2]
            cof[2] = lam[:, 0] * lam[:, 1]
            grads[:, 3] = BUBBLE_SCALE * np.einsum(
                "aq,tad->tqd", cof, self.hat_grads)

        wdet = (2.0 * self.areas)[:, None] * rule.weights[None, :]
        p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
        phys = np.einsum("qa,tad->tqd", lam, p)
        out = (vals, grads, wdet, phys)
        self._tables[key] = out
        return out

    def __repr__(self):
        return (f"FunctionSpace(kind={self.kind.value}, level={self.mesh.level}, "
                f"ndof={self.ndof})")


def build_space(mesh: Mesh, kind: SpaceKind) -> FunctionSpace:
    return FunctionSpace(mesh, kind)


@dataclass
class FEField:
    """Coefficient vector attached to its space."""

    space: FunctionSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.ndof,):
            raise ValueError(
                f"coefficient length {self.coefficients.shape} does not match "
                f"space with {self.space.ndof} DOFs")

    def copy(self) -> "FEField":
        return FEField(self.space, self.coefficients.copy())


def _bary_values(space: FunctionSpace, lam: np.ndarray) -> np.ndarray:
    """Scalar basis values at barycentric points, shape (nloc, m)."""
    lam = np.atleast_2d(lam)
    nloc = space.num_local_scalar
    vals = np.empty((nloc, lam.shape[0]))
    vals[:3] = lam.T
    if nloc == 4:
        vals[3] = BUBBLE_SCALE * lam[:, 0] * lam[:, 1] * lam[:, 2]
    return vals


def values_at(field: FEField, tris: np.ndarray, lams: np.ndarray) -> np.ndarray:
    """Evaluate a field at barycentric points of given triangles.

    Returns shape (m,) for scalar spaces and (m, 2) for velocity.
    """
    space = field.space
    tris = np.asarray(tris)
    vals = _bary_values(space, lams)  # (nloc, m)
    loc = space.component_dofs[tris]  # (m, nloc)
    if space.kind is SpaceKind.VELOCITY_MINI:
        c = field.coefficients
        out = np.empty((tris.shape[0], 2))
        out[:, 0] = np.einsum("ml,lm->m", c[loc], vals)
        out[:, 1] = np.einsum("ml,lm->m", c[loc + space.ncomp_dof], vals)
        return out
    return np.einsum("ml,lm->m", field.coefficients[loc], vals)


def gradients_at(field: FEField, tris: np.ndarray, lams: np.ndarray) -> np.ndarray:
    """Evaluate physical gradients; (m, 2) scalar or (m, 2, 2) velocity.

    For velocity the result is indexed ``[point, component, derivative]``.
    """
    space = field.space
    tris = np.asarray(tris)
    lams = np.atleast_2d(lams)
    m = tris.shape[0]
    hat_g = space.hat_grads[tris]  # (m, 3, 2)
    nloc = space.num_local_scalar
    basis_g = np.empty((m, nloc, 2))
    basis_g[:, :3] = hat_g
    if nloc == 4:
        cof = np.empty((m, 3))
        cof[:, 0] = lams[:, 1] * lams[:, 2]
        cof[:, 1] = lams[:, 0] * lams[:, 2]
        cof[:, 2] = lams[:, 0] * lams[:, 1]
        basis_g[:, 3] = BUBBLE_SCALE * np.einsum("ma,mad->md", cof, hat_g)
    loc = space.component_dofs[tris]
    if space.kind is SpaceKind.VELOCITY_MINI:
        c = field.coefficients
        out = np.empty((m, 2, 2))
        out[:, 0, :] = np.einsum("ml,mld->md", c[loc], basis_g)
        out[:, 1, :] = np.einsum("ml,mld->md", c[loc + space.ncomp_dof], basis_g)
        return out
    return np.einsum("ml,mld->md", field.coefficients[loc], basis_g)


def evaluate_field(field: FEField, triangle: int, bary_point) -> np.ndarray | float:
    """Evaluate a field at one barycentric point of one triangle."""
    nt = field.space.mesh.num_triangles
    if not 0 <= triangle < nt:
        raise IndexError(f"triangle index {triangle} out of range 0..{nt - 1}")
    lam = np.asarray(bary_point, dtype=float).reshape(1, 3)
    out = values_at(field, np.array([triangle]), lam)
    if field.space.kind is SpaceKind.VELOCITY_MINI:
        return out[0]
    return float(out[0])


def load_vector(space: FunctionSpace, f: Callable, rule: QuadratureRule | None = None,
                ) -> np.ndarray:
    """Assemble the load ``L_i = (f, phi_i)`` by cell quadrature.

    ``f`` maps arrays ``(x, y)`` to values, shape ``(m,)`` for scalar
    spaces and ``(m, 2)`` for velocity.
    """
    if rule is None:
        rule = quadrature_rule(DEFAULT_CELL_DEGREE)
    vals, _, wdet, phys = space.basis_tables(rule)
    x = phys[:, :, 0].ravel()
    y = phys[:, :, 1].ravel()
    fv = np.asarray(f(x, y), dtype=float)
    nt, nq = wdet.shape
    out = np.zeros(space.ndof)
    if space.kind is SpaceKind.VELOCITY_MINI:
        fv = fv.reshape(nt, nq, 2)
        for comp in range(2):
            local = np.einsum("tq,lq,tq->tl", wdet, vals, fv[:, :, comp])
            np.add.at(out, space.component_dofs + comp * space.ncomp_dof, local)
    else:
        fv = fv.reshape(nt, nq)
        local = np.einsum("tq,lq,tq->tl", wdet, vals, fv)
        np.add.at(out, space.component_dofs, local)
    return out


def l2_project(space: FunctionSpace, f: Callable,
               rule: QuadratureRule | None = None,
               tol: float = 1e-12) -> FEField:
    """L2 projection of a pointwise-evaluable function onto the space.

    Solves ``M c = (f, phi_i)`` with the consistent mass matrix and checks
    the relative residual.  For velocity this projects onto the full Mini
    space; the projection onto the discretely divergence-free subspace is
    a saddle solve and lives with the state solver.
    """
    from . import assembly
    from .linsolve import solve_sparse

    mass = assembly.mass_matrix(space)
    b = load_vector(space, f, rule)
    sol = solve_sparse(mass, b, tol=tol)
    return FEField(space, sol.x)
