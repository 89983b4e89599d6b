"""Sparse operator assembly for the coupled flow/heat system.

All cell integrals use the degree-8 rule, which is exact for every
product of Mini/P1 basis functions appearing here (the worst case, a Mini
function times a Mini gradient times a Mini function, has total degree 8
on affine triangles).  Boundary integrals use 3-point Gauss per edge.
Sparse matrices are scipy CSR with canonical (sorted, deduplicated)
structure.

The convection operators are assembled directly in the skew form
``b(u, v, w) = (c(u, v, w) - c(u, w, v)) / 2`` at the element level, so
the quadratic form of every convection matrix vanishes identically and
the time stepping inherits unconditional energy stability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp

from .fem import (DEFAULT_CELL_DEGREE, FEField, FunctionSpace, SpaceKind,
                  build_space, edge_quadrature, quadrature_rule)
from .mesh import Mesh

__all__ = [
    "SpaceSet",
    "OperatorSet",
    "build_space_set",
    "assemble_operator_set",
    "mass_matrix",
    "stiffness_matrix",
    "divergence_matrix",
    "boundary_mass_matrix",
    "buoyancy_matrix",
    "assemble_convection_velocity",
    "assemble_convection_scalar",
    "assemble_trilinear_vector",
    "time_average",
]

_RULE = quadrature_rule(DEFAULT_CELL_DEGREE)
_TIME_GAUSS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True)
class SpaceSet:
    velocity: FunctionSpace
    pressure: FunctionSpace
    temperature: FunctionSpace

    @property
    def mesh(self) -> Mesh:
        return self.velocity.mesh


def build_space_set(mesh: Mesh) -> SpaceSet:
    return SpaceSet(
        velocity=build_space(mesh, SpaceKind.VELOCITY_MINI),
        pressure=build_space(mesh, SpaceKind.PRESSURE_P1),
        temperature=build_space(mesh, SpaceKind.SCALAR_P1),
    )


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Time-independent matrices of the discretization.

    ``B`` maps velocity DOFs to pressure test functions via
    ``B[q, v] = -(q, div v)``; ``G`` maps temperature DOFs to velocity
    test functions via ``G[v, s] = (s * g, v)``; ``pressure_mean`` holds
    the integrals of the pressure basis functions used by the zero-mean
    constraint.
    """

    spaces: SpaceSet
    M_v: sp.csr_matrix
    K_v: sp.csr_matrix
    B: sp.csr_matrix
    M_theta: sp.csr_matrix
    K_theta: sp.csr_matrix
    B_gamma: sp.csr_matrix
    G: sp.csr_matrix
    pressure_mean: np.ndarray


def _global_from_local(local: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                       shape: tuple[int, int],
                       symmetrize: bool = False) -> sp.csr_matrix:
    nt, a, b = local.shape
    r = np.repeat(rows, b, axis=1).ravel()
    c = np.tile(cols, (1, a)).ravel()
    mat = sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    if symmetrize:
        # local kernels are exactly symmetric; this removes the last-bit
        # noise of summation order so the global matrix is bitwise symmetric
        mat = 0.5 * (mat + mat.T.tocsr())
        mat.sort_indices()
    return mat


def _component_mass_local(space: FunctionSpace) -> np.ndarray:
    vals, _, wdet, _ = space.basis_tables(_RULE)
    return np.einsum("tq,aq,bq->tab", wdet, vals, vals)


def _component_stiffness_local(space: FunctionSpace) -> np.ndarray:
    _, grads, wdet, _ = space.basis_tables(_RULE)
    return np.einsum("tq,taqd,tbqd->tab", wdet, grads, grads)


def _block_diag2(comp: sp.csr_matrix) -> sp.csr_matrix:
    out = sp.block_diag((comp, comp), format="csr")
    out.sort_indices()
    return out


def mass_matrix(space: FunctionSpace) -> sp.csr_matrix:
    local = _component_mass_local(space)
    dofs = space.component_dofs
    n = space.ncomp_dof
    comp = _global_from_local(local, dofs, dofs, (n, n), symmetrize=True)
    if space.kind is SpaceKind.VELOCITY_MINI:
        return _block_diag2(comp)
    return comp


def stiffness_matrix(space: FunctionSpace) -> sp.csr_matrix:
    local = _component_stiffness_local(space)
    dofs = space.component_dofs
    n = space.ncomp_dof
    comp = _global_from_local(local, dofs, dofs, (n, n), symmetrize=True)
    if space.kind is SpaceKind.VELOCITY_MINI:
        return _block_diag2(comp)
    return comp


def divergence_matrix(velocity: FunctionSpace, pressure: FunctionSpace
                      ) -> sp.csr_matrix:
    """``B[q, v] = -(q, div v)`` on pressure rows, velocity columns."""
    p_vals, _, wdet, _ = pressure.basis_tables(_RULE)
    _, v_grads, _, _ = velocity.basis_tables(_RULE)
    blocks = []
    for comp in range(2):
        local = -np.einsum("tq,aq,tbq->tab", wdet, p_vals, v_grads[:, :, :, comp])
        blocks.append(_global_from_local(
            local, pressure.element_dofs, velocity.component_dofs,
            (pressure.ndof, velocity.ncomp_dof)))
    out = sp.hstack(blocks, format="csr")
    out.sort_indices()
    return out


def boundary_mass_matrix(space: FunctionSpace,
                         num_points: int = 3) -> sp.csr_matrix:
    """P1 trace mass matrix on the boundary, ``(u, v)_Gamma``."""
    mesh = space.mesh
    s, w = edge_quadrature(num_points)
    lengths = mesh.boundary_edge_lengths()
    # local[e] = L_e * int over [0,1] of hat_a(s) hat_b(s)
    hat = np.vstack([1.0 - s, s])  # (2, nq)
    unit = np.einsum("q,aq,bq->ab", w, hat, hat)
    local = lengths[:, None, None] * unit[None, :, :]
    dofs = mesh.boundary_edges
    return _global_from_local(local, dofs, dofs, (space.ndof, space.ndof),
                              symmetrize=True)


def buoyancy_matrix(velocity: FunctionSpace, temperature: FunctionSpace,
                    g: np.ndarray) -> sp.csr_matrix:
    """``G[v, s] = (s * g, v)`` coupling temperature into velocity tests."""
    v_vals, _, wdet, _ = velocity.basis_tables(_RULE)
    t_vals, _, _, _ = temperature.basis_tables(_RULE)
    mixed_local = np.einsum("tq,aq,bq->tab", wdet, v_vals, t_vals)
    mixed = _global_from_local(
        mixed_local, velocity.component_dofs, temperature.element_dofs,
        (velocity.ncomp_dof, temperature.ndof))
    out = sp.vstack([g[0] * mixed, g[1] * mixed], format="csr")
    out.sort_indices()
    return out


def assemble_operator_set(spaces: SpaceSet,
                          g: np.ndarray | None = None) -> OperatorSet:
    """Assemble every time-independent operator on one mesh.

    ``g`` is the gravity vector entering the buoyancy coupling; it
    defaults to (0, 1) and can be rescaled later since ``G`` is linear
    in it, but passing the physical value keeps call sites simple.
    """
    g = np.asarray(g if g is not None else (0.0, 1.0), dtype=float)
    M_theta = mass_matrix(spaces.temperature)
    return OperatorSet(
        spaces=spaces,
        M_v=mass_matrix(spaces.velocity),
        K_v=stiffness_matrix(spaces.velocity),
        B=divergence_matrix(spaces.velocity, spaces.pressure),
        M_theta=M_theta,
        K_theta=stiffness_matrix(spaces.temperature),
        B_gamma=boundary_mass_matrix(spaces.temperature),
        G=buoyancy_matrix(spaces.velocity, spaces.temperature, g),
        pressure_mean=np.asarray(M_theta.sum(axis=1)).ravel(),
    )


def _velocity_at_quadrature(w: FEField) -> np.ndarray:
    """Values of a Mini velocity field at the cell quadrature points."""
    space = w.space
    vals, _, _, _ = space.basis_tables(_RULE)
    loc = space.component_dofs
    c = w.coefficients
    out = np.empty((space.mesh.num_triangles, _RULE.num_points, 2))
    out[:, :, 0] = np.einsum("tl,lq->tq", c[loc], vals)
    out[:, :, 1] = np.einsum("tl,lq->tq", c[loc + space.ncomp_dof], vals)
    return out


def _convection_local(basis_space: FunctionSpace, w: FEField) -> np.ndarray:
    """Skew local kernel ``N[a,b] = b(w, psi_b, psi_a)`` on scalar basis."""
    vals, grads, wdet, _ = basis_space.basis_tables(_RULE)
    wv = _velocity_at_quadrature(w)
    wdotgrad = np.einsum("tqd,tbqd->tqb", wv, grads)
    c1 = np.einsum("tq,aq,tqb->tab", wdet, vals, wdotgrad)
    return 0.5 * (c1 - c1.transpose(0, 2, 1))


def assemble_convection_velocity(w: FEField) -> sp.csr_matrix:
    """Matrix ``N`` with ``test' N trial = b(w, trial, test)`` on velocity.

    The convecting field couples components only through its own values,
    so ``N`` is block diagonal over the two velocity components.
    """
    space = w.space
    local = _convection_local(space, w)
    dofs = space.component_dofs
    n = space.ncomp_dof
    comp = _global_from_local(local, dofs, dofs, (n, n))
    return _block_diag2(comp)


def assemble_convection_scalar(temperature: FunctionSpace, w: FEField
                               ) -> sp.csr_matrix:
    """Scalar analogue of :func:`assemble_convection_velocity` on P1."""
    local = _convection_local(temperature, w)
    dofs = temperature.element_dofs
    return _global_from_local(local, dofs, dofs,
                              (temperature.ndof, temperature.ndof))


def assemble_trilinear_vector(form: Literal["velocity", "scalar"],
                              f1: FEField, f2: FEField,
                              velocity: FunctionSpace | None = None
                              ) -> np.ndarray:
    """Vector ``V_i = b(phi_i, f1, f2)`` over velocity test functions.

    ``form="velocity"`` takes two Mini velocity fields; ``form="scalar"``
    takes two P1 scalar fields (and needs the velocity test space).  The
    integrand for test component c is
    ``((d_c f1) . f2 - (d_c f2) . f1) / 2`` evaluated at quadrature points.
    """
    if form == "velocity":
        if f1.space.kind is not SpaceKind.VELOCITY_MINI \
                or f2.space.kind is not SpaceKind.VELOCITY_MINI:
            raise ValueError("velocity form requires two Mini velocity fields")
        velocity = f1.space
        v1, g1 = _values_and_gradients(f1)
        v2, g2 = _values_and_gradients(f2)
        # F[t,q,c] = 0.5 * sum_k (g1[t,q,k,c] v2[t,q,k] - g2[t,q,k,c] v1[t,q,k])
        F = 0.5 * (np.einsum("tqkc,tqk->tqc", g1, v2)
                   - np.einsum("tqkc,tqk->tqc", g2, v1))
    elif form == "scalar":
        if velocity is None:
            raise ValueError("scalar form requires the velocity test space")
        if f1.space.kind is SpaceKind.VELOCITY_MINI \
                or f2.space.kind is SpaceKind.VELOCITY_MINI:
            raise ValueError("scalar form requires two scalar fields")
        v1, g1 = _values_and_gradients(f1)
        v2, g2 = _values_and_gradients(f2)
        F = 0.5 * (g1 * v2[:, :, None] - g2 * v1[:, :, None])
    else:
        raise ValueError(f"unknown trilinear form {form!r}")

    vals, _, wdet, _ = velocity.basis_tables(_RULE)
    out = np.zeros(velocity.ndof)
    for comp in range(2):
        local = np.einsum("tq,aq,tq->ta", wdet, vals, F[:, :, comp])
        np.add.at(out, velocity.component_dofs + comp * velocity.ncomp_dof, local)
    return out


def _values_and_gradients(f: FEField) -> tuple[np.ndarray, np.ndarray]:
    """Field values and physical gradients at the cell quadrature points.

    Scalar: values (nt, nq), gradients (nt, nq, 2).  Velocity: values
    (nt, nq, 2), gradients (nt, nq, 2, 2) indexed [.., component, deriv].
    """
    space = f.space
    vals, grads, _, _ = space.basis_tables(_RULE)
    loc = space.component_dofs
    c = f.coefficients
    if space.kind is SpaceKind.VELOCITY_MINI:
        v = np.empty((loc.shape[0], _RULE.num_points, 2))
        g = np.empty((loc.shape[0], _RULE.num_points, 2, 2))
        for comp in range(2):
            cc = c[loc + comp * space.ncomp_dof]
            v[:, :, comp] = np.einsum("tl,lq->tq", cc, vals)
            g[:, :, comp, :] = np.einsum("tl,tlqd->tqd", cc, grads)
        return v, g
    cc = c[loc]
    v = np.einsum("tl,lq->tq", cc, vals)
    g = np.einsum("tl,tlqd->tqd", cc, grads)
    return v, g


def time_average(data: Callable[[float], object], grid, n: int):
    """Average of ``data(t)`` over the n-th time interval (1-based).

    Uses 5-point Gauss; exact for polynomial time dependence up to degree
    9 and accurate to ~1e-13 for smooth data on unit-length intervals.
    ``data`` may return scalars or arrays.
    """
    nodes = grid.nodes
    if not 1 <= n <= len(nodes) - 1:
        raise IndexError(f"interval index {n} out of range 1..{len(nodes) - 1}")
    t0, t1 = nodes[n - 1], nodes[n]
    g, w = _TIME_GAUSS
    ts = 0.5 * (t1 - t0) * g + 0.5 * (t0 + t1)
    acc = None
    for tg, wg in zip(ts, 0.5 * w):
        val = data(tg)
        acc = wg * np.asarray(val, dtype=float) if acc is None \
            else acc + wg * np.asarray(val, dtype=float)
    if np.ndim(acc) == 0:
        return float(acc)
    return acc


def time_average_function(data: Callable, grid, n: int) -> Callable:
    """Interval average of space-time data, returned as a spatial function.

    ``data(t, x, y)`` is sampled at the 5 Gauss times of the n-th interval;
    the result maps ``(x, y)`` arrays to the weighted combination.
    """
    nodes = grid.nodes
    if not 1 <= n <= len(nodes) - 1:
        raise IndexError(f"interval index {n} out of range 1..{len(nodes) - 1}")
    t0, t1 = nodes[n - 1], nodes[n]
    g, w = _TIME_GAUSS
    ts = 0.5 * (t1 - t0) * g + 0.5 * (t0 + t1)
    ws = 0.5 * w

    def averaged(x, y):
        acc = ws[0] * np.asarray(data(ts[0], x, y), dtype=float)
        for tg, wg in zip(ts[1:], ws[1:]):
            acc = acc + wg * np.asarray(data(tg, x, y), dtype=float)
        return acc

    return averaged
