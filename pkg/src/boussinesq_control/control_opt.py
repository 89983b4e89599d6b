"""Boundary controls, discrete objective, gradient and projected gradient.

Controls are never given their own mesh.  A control is stored per time
interval as nodal values of a P1 trace on the boundary, optionally
composed with a pointwise clamp to the admissible box.  The clamp of a
linear function along an edge is continuous piecewise linear with at most
two extra breakpoints, so every boundary integral here (loads, norms,
inner products) is evaluated exactly by splitting at breakpoints and
using the closed-form product rule for linear pieces.  This keeps the
discrete gradient identity exact down to solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adjoint import AdjointTrajectory, solve_adjoint
from .assembly import OperatorSet
from .fem import FunctionSpace
from .forward import (PhysicalParams, ProblemData, StateTrajectory, TimeGrid,
                      _averaged_data_l2sq, _averaged_load, solve_state)

__all__ = [
    "BoundaryGeometry",
    "ControlField",
    "ControlCombination",
    "OptResult",
    "objective",
    "gradient_trace",
    "project_control",
    "projected_gradient",
    "gamma_inner",
    "gamma_diff_norm_sq",
    "spacetime_inner",
    "spacetime_diff_norm",
]


class BoundaryGeometry:
    """Edgewise description of the boundary trace of a P1 space."""

    def __init__(self, space: FunctionSpace):
        mesh = space.mesh
        self.space = space
        self.mesh = mesh
        self.bvertices = space.boundary_dofs
        nv = mesh.num_vertices
        self.v2b = np.full(nv, -1, dtype=np.int64)
        self.v2b[self.bvertices] = np.arange(len(self.bvertices))
        self.edges = mesh.boundary_edges
        self.lengths = mesh.boundary_edge_lengths()
        self.edge_b = self.v2b[self.edges]
        self.coords = mesh.vertices[self.bvertices]

        pa = mesh.vertices[self.edges[:, 0]]
        pb = mesh.vertices[self.edges[:, 1]]
        self.sides = np.empty(len(self.edges), dtype=np.int64)
        self.side_params = np.empty((len(self.edges), 2))
        for e, (a, b) in enumerate(zip(pa, pb)):
            if a[1] == 0.0 and b[1] == 0.0:
                self.sides[e], self.side_params[e] = 0, (a[0], b[0])
            elif a[0] == 1.0 and b[0] == 1.0:
                self.sides[e], self.side_params[e] = 1, (a[1], b[1])
            elif a[1] == 1.0 and b[1] == 1.0:
                self.sides[e], self.side_params[e] = 2, (a[0], b[0])
            elif a[0] == 0.0 and b[0] == 0.0:
                self.sides[e], self.side_params[e] = 3, (a[1], b[1])
            else:
                raise ValueError("boundary edge not on a side of the square")
        self._by_side = [np.nonzero(self.sides == s)[0] for s in range(4)]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def find_edge_on_side(self, side: int, lo: float, hi: float,
                          tol: float = 1e-12) -> tuple[int, float, float]:
        """Edge of the given side covering the axis range [lo, hi].

        Returns ``(edge index, t(lo), t(hi))`` in the edge's own parameter.
        """
        for e in self._by_side[side]:
            p0, p1 = self.side_params[e]
            if min(p0, p1) - tol <= lo and hi <= max(p0, p1) + tol:
                return e, (lo - p0) / (p1 - p0), (hi - p0) / (p1 - p0)
        raise ValueError(f"no edge on side {side} covers [{lo}, {hi}]")


def _raw_polyline(va: float, vb: float) -> tuple[np.ndarray, np.ndarray]:
    return np.array([0.0, 1.0]), np.array([va, vb])


def _clamped_polyline(va: float, vb: float, lo: float, hi: float
                      ) -> tuple[np.ndarray, np.ndarray]:
    breaks = [0.0, 1.0]
    if vb != va:
        for c in (lo, hi):
            if np.isfinite(c):
                s = (c - va) / (vb - va)
                if 0.0 < s < 1.0:
                    breaks.append(s)
    s = np.unique(np.asarray(breaks))
    v = np.clip(va + (vb - va) * s, lo, hi)
    return s, v


def _merge(polys: Sequence[tuple[np.ndarray, np.ndarray]],
           scales: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise linear combination of polylines on a common breakpoint set."""
    s = np.unique(np.concatenate([p[0] for p in polys]))
    v = np.zeros_like(s)
    for (ps, pv), c in zip(polys, scales):
        v += c * np.interp(s, ps, pv)
    return s, v


def _product_integral(s: np.ndarray, f: np.ndarray, g: np.ndarray) -> float:
    """Exact integral over [0, 1] of two piecewise linears on shared breaks."""
    ds = np.diff(s)
    f0, f1 = f[:-1], f[1:]
    g0, g1 = g[:-1], g[1:]
    return float((ds * (2 * f0 * g0 + f0 * g1 + f1 * g0 + 2 * f1 * g1)).sum() / 6.0)


@dataclass(eq=False)
class ControlField:
    """Per-interval boundary control under variational discretization.

    ``values[n-1]`` holds the nodal trace for interval n.  In clamped
    mode these are the pre-clamp values and the evaluated control is the
    pointwise projection of their P1 interpolant onto ``[u_a, u_b]``.
    """

    grid: TimeGrid
    geometry: BoundaryGeometry
    values: np.ndarray
    mode: str = "raw"
    bounds: Optional[tuple[float, float]] = None

    def __post_init__(self):
        N = self.grid.num_steps
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (N, len(self.geometry.bvertices)):
            raise ValueError("control values must be (num_steps, num_boundary_vertices)")
        if self.mode == "clamped":
            if self.bounds is None:
                raise ValueError("clamped mode needs bounds")
        elif self.mode != "raw":
            raise ValueError(f"unknown control mode {self.mode!r}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, grid: TimeGrid, geometry: BoundaryGeometry) -> "ControlField":
        return cls(grid, geometry,
                   np.zeros((grid.num_steps, len(geometry.bvertices))))

    @classmethod
    def raw(cls, grid: TimeGrid, geometry: BoundaryGeometry,
            values: np.ndarray) -> "ControlField":
        return cls(grid, geometry, values)

    @classmethod
    def from_adjoint(cls, params: PhysicalParams, adjoint: AdjointTrajectory,
                     geometry: BoundaryGeometry) -> "ControlField":
        """The fixed-point update ``Proj_[ua,ub](-(eta/alpha) kappa|_Gamma)``."""
        N = adjoint.grid.num_steps
        scale = -params.eta / params.alpha
        vals = scale * adjoint.kappa[1:N + 1][:, geometry.bvertices]
        return cls(adjoint.grid, geometry, vals, mode="clamped",
                   bounds=(params.u_a, params.u_b))

    @property
    def num_intervals(self) -> int:
        return self.grid.num_steps

    def nodal(self, n: int) -> np.ndarray:
        return self.values[n - 1]

    def edge_polyline(self, n: int, e: int) -> tuple[np.ndarray, np.ndarray]:
        ia, ib = self.geometry.edge_b[e]
        va, vb = self.values[n - 1, ia], self.values[n - 1, ib]
        if self.mode == "clamped":
            return _clamped_polyline(va, vb, *self.bounds)
        return _raw_polyline(va, vb)

    def boundary_load(self, space: FunctionSpace, n: int) -> np.ndarray:
        return boundary_load_of(self, space, n)

    def l2_gamma_sq(self, n: int) -> float:
        return gamma_inner(self, self, n)

    def scaled(self, c: float) -> "ControlCombination":
        return ControlCombination([(c, self)])


@dataclass(eq=False)
class ControlCombination:
    """Lazy linear combination of control-like traces.

    Keeps perturbed controls (for difference quotients) and the gradient
    trace ``eta*kappa + alpha*u`` exactly representable: a combination of
    piecewise linears is merged breakpoint-wise on demand.
    """

    terms: list[tuple[float, object]]

    @property
    def grid(self) -> TimeGrid:
        return self.terms[0][1].grid

    @property
    def geometry(self) -> BoundaryGeometry:
        return self.terms[0][1].geometry

    @property
    def num_intervals(self) -> int:
        return self.terms[0][1].num_intervals

    def edge_polyline(self, n: int, e: int) -> tuple[np.ndarray, np.ndarray]:
        return _merge([t.edge_polyline(n, e) for _, t in self.terms],
                      [c for c, _ in self.terms])

    def boundary_load(self, space: FunctionSpace, n: int) -> np.ndarray:
        out = None
        for c, t in self.terms:
            contrib = c * t.boundary_load(space, n)
            out = contrib if out is None else out + contrib
        return out

    def l2_gamma_sq(self, n: int) -> float:
        return gamma_inner(self, self, n)

    def plus(self, c: float, other) -> "ControlCombination":
        return ControlCombination(self.terms + [(c, other)])


def boundary_load_of(ctrl, space: FunctionSpace, n: int) -> np.ndarray:
    """Exact load ``(u^n, psi_i)_Gamma`` against the P1 boundary traces."""
    geo = ctrl.geometry
    out = np.zeros(space.ndof)
    for e in range(geo.num_edges):
        s, v = ctrl.edge_polyline(n, e)
        L = geo.lengths[e]
        a, b = geo.edges[e]
        out[a] += L * _product_integral(s, v, 1.0 - s)
        out[b] += L * _product_integral(s, v, s)
    return out


def gamma_inner(a, b, n: int) -> float:
    """Exact ``(a^n, b^n)_Gamma`` for two control-like traces."""
    geo = a.geometry
    total = 0.0
    for e in range(geo.num_edges):
        sa, va = a.edge_polyline(n, e)
        sb, vb = b.edge_polyline(n, e)
        s = np.unique(np.concatenate([sa, sb]))
        fa = np.interp(s, sa, va)
        fb = np.interp(s, sb, vb)
        total += geo.lengths[e] * _product_integral(s, fa, fb)
    return total


def gamma_diff_norm_sq(a, b, n: int) -> float:
    """Exact ``||a^n - b^n||^2_Gamma`` without cancellation of near-equal
    traces: the difference polyline is formed first, then squared."""
    geo = a.geometry
    total = 0.0
    for e in range(geo.num_edges):
        s, v = _merge([a.edge_polyline(n, e), b.edge_polyline(n, e)],
                      [1.0, -1.0])
        total += geo.lengths[e] * _product_integral(s, v, v)
    return total


def spacetime_inner(a, b, grid: TimeGrid) -> float:
    """``sum_n tau_n (a^n, b^n)_Gamma``, the L2(I; L2(Gamma)) pairing."""
    return sum(grid.step(n) * gamma_inner(a, b, n)
               for n in range(1, grid.num_steps + 1))


def spacetime_diff_norm(a, b, grid: TimeGrid) -> float:
    return float(np.sqrt(sum(grid.step(n) * gamma_diff_norm_sq(a, b, n)
                             for n in range(1, grid.num_steps + 1))))


def project_control(raw, bounds: tuple[float, float]) -> ControlField:
    """Pointwise projection of a control onto the admissible box.

    Idempotent; projecting an already clamped field composes the clamps
    exactly (the composition of interval clamps is the clamp onto
    ``[proj(a1), proj(b1)]`` applied to the original trace).
    """
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("bounds must satisfy u_a < u_b")
    if isinstance(raw, ControlField) and raw.mode == "clamped":
        a1, b1 = raw.bounds
        eff = (float(np.clip(a1, lo, hi)), float(np.clip(b1, lo, hi)))
        return ControlField(raw.grid, raw.geometry, raw.values.copy(),
                            mode="clamped", bounds=eff)
    return ControlField(raw.grid, raw.geometry, raw.values.copy(),
                        mode="clamped", bounds=(float(lo), float(hi)))


def objective(params: PhysicalParams, data: ProblemData, grid: TimeGrid,
              state: StateTrajectory, u) -> float:
    """Discrete tracking objective at a control and its state trajectory.

    Uses the interval-averaged targets in the quadratic tracking terms,
    matching the adjoint right-hand side; the omitted control-independent
    constant (difference between averaged and exact target quadratics)
    does not affect the optimization or any derivative.
    """
    ops = state.operators
    spaces = ops.spaces
    yd_cache: dict = {}
    thd_cache: dict = {}
    ydsq_cache: dict = {}
    thdsq_cache: dict = {}
    total = 0.0
    for n in range(1, grid.num_steps + 1):
        tau = grid.step(n)
        yn = state.velocity[n]
        thn = state.temperature[n]
        ld_y = _averaged_load(spaces.velocity, data.target_velocity, grid, n,
                              yd_cache)
        ld_th = _averaged_load(spaces.temperature, data.target_temperature,
                               grid, n, thd_cache)
        c_y = _averaged_data_l2sq(spaces.velocity, data.target_velocity, grid,
                                  n, ydsq_cache)
        c_th = _averaged_data_l2sq(spaces.temperature, data.target_temperature,
                                   grid, n, thdsq_cache)
        track = (0.5 * float(yn @ (ops.M_v @ yn)) - float(yn @ ld_y) + 0.5 * c_y
                 + 0.5 * float(thn @ (ops.M_theta @ thn)) - float(thn @ ld_th)
                 + 0.5 * c_th)
        total += tau * (track + 0.5 * params.alpha * u.l2_gamma_sq(n))
    return total


def gradient_trace(params: PhysicalParams, adjoint: AdjointTrajectory,
                   u) -> ControlCombination:
    """Reduced gradient ``eta * kappa|_Gamma + alpha * u`` per interval."""
    geo = u.geometry
    N = adjoint.grid.num_steps
    kappa_trace = ControlField(
        adjoint.grid, geo, adjoint.kappa[1:N + 1][:, geo.bvertices])
    return ControlCombination([(params.eta, kappa_trace), (params.alpha, u)])


@dataclass
class OptResult:
    control: ControlField
    iterations: int
    residuals: list[float]
    objectives: list[float]
    objective: float
    converged: bool


def projected_gradient(params: PhysicalParams, data: ProblemData,
                       operators: OperatorSet, grid: TimeGrid, u0,
                       tol: float = 1e-6, max_iter: int = 200,
                       solver_tol: float = 1e-10,
                       callback=None) -> OptResult:
    """Fixed-step projected gradient in its exact fixed-point form.

    The step-``1/alpha`` projected-gradient update collapses to
    ``u <- Proj(-(eta/alpha) kappa(u)|_Gamma)`` because
    ``u - (eta kappa + alpha u)/alpha = -(eta/alpha) kappa``; iteration
    stops when the space-time boundary L2 distance between consecutive
    iterates drops to ``tol``.  Non-convergence is reported, not raised.
    """
    geo = u0.geometry
    u = u0
    residuals: list[float] = []
    objectives: list[float] = []
    converged = False
    iterations = 0
    for k in range(max_iter):
        state = solve_state(params, data, operators, grid, u, tol=solver_tol)
        objectives.append(objective(params, data, grid, state, u))
        adj = solve_adjoint(params, data, operators, grid, state,
                            tol=solver_tol)
        u_next = ControlField.from_adjoint(params, adj, geo)
        res = spacetime_diff_norm(u_next, u, grid)
        residuals.append(res)
        u = u_next
        iterations = k + 1
        if callback is not None:
            callback(iterations, res, objectives[-1])
        if res <= tol:
            converged = True
            break
    state = solve_state(params, data, operators, grid, u, tol=solver_tol)
    final_objective = objective(params, data, grid, state, u)
    return OptResult(u, iterations, residuals, objectives, final_objective,
                     converged)
