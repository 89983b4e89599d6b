"""Space-time error norms on nested grids and convergence-order tables.

Errors are measured against a fine reference run, mirroring the
methodology of the experiments the toolkit reproduces: the coarse
solution is transferred to the reference mesh/time grid exactly (the
meshes are nested and piecewise-constant-in-time functions reproduce
exactly on refined dyadic grids) and norms are evaluated there.

P1 fields transfer by exact nodal prolongation, after which the discrete
mass/stiffness norms apply.  Mini velocity fields are not nested under
refinement (the coarse bubble leaves the fine Mini space), so velocity
errors are integrated by quadrature on the reference mesh, where both
the prolonged coarse field and the reference field are polynomials per
element and the degree-8 rule is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import assembly as asm
from .adjoint import solve_adjoint
from .assembly import OperatorSet, build_space_set
from .control_opt import (BoundaryGeometry, ControlField, _merge,
                          _product_integral, projected_gradient)
from .fem import (DEFAULT_CELL_DEGREE, FEField, FunctionSpace, SpaceKind,
                  gradients_at, quadrature_rule, values_at)
from .forward import (PhysicalParams, ProblemData, TimeGrid, solve_state)
from .mesh import Mesh, build_unit_square_mesh

__all__ = [
    "ErrorReport",
    "EocTable",
    "ProlongedVelocity",
    "prolong",
    "prolong_control",
    "space_time_norms",
    "eoc",
    "run_spatial_study",
    "run_temporal_study",
    "STUDY_NORMS",
]

_RULE = quadrature_rule(DEFAULT_CELL_DEGREE)

STUDY_NORMS = (
    "y_linf_l2", "theta_linf_l2", "y_l2_h1", "theta_l2_h1",
    "mu_linf_l2", "kappa_linf_l2", "mu_l2_h1", "kappa_l2_h1",
    "u_l2_l2",
)


@dataclass
class ErrorReport:
    """Error values of one coarse run against the reference."""

    h_level: int
    num_steps: int
    values: dict[str, float]

    def __post_init__(self):
        for name, v in self.values.items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"invalid error value {name}={v}")


@dataclass
class EocTable:
    """Rows of (parameter, error, rate) per norm.

    ``rates[name][i]`` is the observed order between rows i and i+1,
    ``log(e_i / e_{i+1}) / log(param_i / param_{i+1})``.
    """

    parameter_name: str
    parameters: list[float]
    errors: dict[str, list[float]]
    rates: dict[str, list[float]]

    def format_text(self) -> str:
        names = list(self.errors)
        lines = ["  ".join([f"{self.parameter_name:>10}"]
                           + [f"{n:>14} {'rate':>6}" for n in names])]
        for i, p in enumerate(self.parameters):
            cells = [f"{p:>10.5g}"]
            for n in names:
                r = self.rates[n][i - 1] if i > 0 else None
                cells.append(f"{self.errors[n][i]:>14.4e} "
                             + (f"{r:>6.2f}" if r is not None else f"{'-':>6}"))
            lines.append("  ".join(cells))
        return "\n".join(lines)


def eoc(errors: Sequence[float], parameters: Sequence[float]) -> list[float]:
    """Observed convergence rates between consecutive rows."""
    if len(errors) < 2 or len(errors) != len(parameters):
        raise ValueError("need at least two matching error/parameter entries")
    if any(e <= 0 for e in errors):
        raise ValueError("error values must be positive to compute rates")
    rates = []
    for i in range(len(errors) - 1):
        ratio = parameters[i] / parameters[i + 1]
        if ratio <= 1:
            raise ValueError("parameters must decrease")
        rates.append(math.log(errors[i] / errors[i + 1]) / math.log(ratio))
    return rates


def make_eoc_table(parameter_name: str, parameters: Sequence[float],
                   reports: Sequence[ErrorReport],
                   norms: Sequence[str] = STUDY_NORMS) -> EocTable:
    errors = {n: [r.values[n] for r in reports] for n in norms}
    rates = {n: eoc(errors[n], parameters) for n in norms}
    return EocTable(parameter_name, list(parameters), errors, rates)


# ---------------------------------------------------------------------------
# prolongation


def _require_nested_meshes(coarse: Mesh, fine: Mesh) -> None:
    if fine.divisions % coarse.divisions != 0:
        raise ValueError(
            f"meshes are not nested: {coarse.divisions} does not divide "
            f"{fine.divisions}")


def require_nested_grids(coarse: TimeGrid, fine: TimeGrid) -> np.ndarray:
    """Map each fine interval to its containing coarse interval (1-based)."""
    idx = np.searchsorted(coarse.nodes, fine.nodes[:-1] + 0.5 * fine.steps)
    cn = coarse.nodes
    fn = fine.nodes
    tol = 1e-12 * max(1.0, cn[-1])
    pos = np.clip(np.searchsorted(fn, cn), 0, len(fn) - 1)
    near = np.minimum(np.abs(fn[pos] - cn),
                      np.abs(fn[np.maximum(pos - 1, 0)] - cn))
    if np.any(near > tol):
        raise ValueError("time grids are not nested")
    return idx


@dataclass(eq=False)
class ProlongedVelocity:
    """Exact fine-mesh representation of a coarse Mini velocity field.

    Evaluation delegates to the coarse field at located points, so the
    bubble tails are preserved exactly; norms on the fine mesh integrate
    it with the exact quadrature rule.
    """

    coarse: FEField
    fine_space: FunctionSpace
    tri: np.ndarray
    lam: np.ndarray

    def values(self) -> np.ndarray:
        """Values at the fine-mesh cell quadrature points, (nt, nq, 2)."""
        v = values_at(self.coarse, self.tri, self.lam)
        nt = self.fine_space.mesh.num_triangles
        return v.reshape(nt, _RULE.num_points, 2)

    def gradients(self) -> np.ndarray:
        g = gradients_at(self.coarse, self.tri, self.lam)
        nt = self.fine_space.mesh.num_triangles
        return g.reshape(nt, _RULE.num_points, 2, 2)


class _MeshPair:
    """Cached point location of fine quadrature points and vertices."""

    def __init__(self, coarse_mesh: Mesh, fine_space: FunctionSpace):
        _require_nested_meshes(coarse_mesh, fine_space.mesh)
        _, _, _, phys = fine_space.basis_tables(_RULE)
        pts = phys.reshape(-1, 2)
        self.qtri, self.qlam = coarse_mesh.locate_points(pts)
        self.vtri, self.vlam = coarse_mesh.locate_points(
            fine_space.mesh.vertices)


def prolong(coarse_field: FEField, fine_space: FunctionSpace,
            pair: Optional[_MeshPair] = None):
    """Exact representation of a coarse FE function on a nested fine mesh.

    P1 fields return a fine :class:`FEField` (nodal values reproduce the
    function exactly); Mini velocity fields return a
    :class:`ProlongedVelocity` evaluator since the coarse bubbles are not
    contained in the fine Mini space.
    """
    if pair is None:
        pair = _MeshPair(coarse_field.space.mesh, fine_space)
    if coarse_field.space.kind is SpaceKind.VELOCITY_MINI:
        if fine_space.kind is not SpaceKind.VELOCITY_MINI:
            raise ValueError("velocity fields prolong to velocity spaces")
        return ProlongedVelocity(coarse_field, fine_space, pair.qtri, pair.qlam)
    vals = values_at(coarse_field, pair.vtri, pair.vlam)
    return FEField(fine_space, vals)


def prolong_control(coarse: ControlField, fine_grid: TimeGrid,
                    fine_geometry: BoundaryGeometry) -> ControlField:
    """Transfer a control to a finer grid/boundary, for warm starts.

    Pre-clamp nodal values are interpolated along the boundary (exact for
    nested boundary vertices) and intervals are matched by containment.
    """
    tmap = require_nested_grids(coarse.grid, fine_grid)
    cgeo = coarse.geometry
    fgeo = fine_geometry
    nbf = len(fgeo.bvertices)
    vals = np.empty((fine_grid.num_steps, nbf))
    locators = []
    for k in range(nbf):
        x, y = fgeo.coords[k]
        if y == 0.0:
            side, a = 0, x
        elif x == 1.0:
            side, a = 1, y
        elif y == 1.0:
            side, a = 2, x
        else:
            side, a = 3, y
        e, t0, _ = cgeo.find_edge_on_side(side, a, a)
        locators.append((e, min(max(t0, 0.0), 1.0)))
    for m in range(1, fine_grid.num_steps + 1):
        n = int(tmap[m - 1])
        row = coarse.values[n - 1]
        for k, (e, t) in enumerate(locators):
            ia, ib = cgeo.edge_b[e]
            vals[m - 1, k] = row[ia] + (row[ib] - row[ia]) * t
    return ControlField(fine_grid, fine_geometry, vals, mode=coarse.mode,
                        bounds=coarse.bounds)


# ---------------------------------------------------------------------------
# norms


def space_time_norms(rows: np.ndarray, M, K, grid: TimeGrid,
                     steps: Optional[Sequence[int]] = None) -> dict[str, float]:
    """Discrete space-time norms of per-step coefficient vectors.

    ``rows[n]`` holds the coefficients on interval n; the piecewise
    constant in time convention gives ``L2(I;X)^2 = sum tau_n |row_n|_X^2``
    and the L-infinity norm as the max over steps.
    """
    if steps is None:
        steps = range(1, grid.num_steps + 1)
    l2_l2 = 0.0
    l2_h1 = 0.0
    linf_l2 = 0.0
    for n in steps:
        v = rows[n]
        tau = grid.step(n)
        m_sq = float(v @ (M @ v))
        k_sq = float(v @ (K @ v))
        l2_l2 += tau * m_sq
        l2_h1 += tau * (m_sq + k_sq)
        linf_l2 = max(linf_l2, m_sq)
    return {"l2_l2": math.sqrt(max(l2_l2, 0.0)),
            "l2_h1": math.sqrt(max(l2_h1, 0.0)),
            "linf_l2": math.sqrt(max(linf_l2, 0.0))}


def _step_triples(coarse_grid: TimeGrid, ref_grid: TimeGrid,
                  sampling: str, continuity: str) -> list[tuple[int, int, float]]:
    """(coarse step, reference step, weight) triples for error sums.

    ``sampling="fine"`` walks every reference interval with its own weight
    (the exact norm of the piecewise-constant-in-time difference);
    ``sampling="nodal"`` walks the coarse intervals and pairs each with
    the reference interval sharing its right endpoint (left endpoint for
    the left-continuous adjoint quantities), which is how the reference
    experiments tabulate temporal errors.
    """
    tmap = require_nested_grids(coarse_grid, ref_grid)
    if sampling == "fine":
        return [(int(tmap[m - 1]), m, ref_grid.step(m))
                for m in range(1, ref_grid.num_steps + 1)]
    if sampling != "nodal":
        raise ValueError(f"unknown sampling {sampling!r}")
    triples = []
    fn = ref_grid.nodes
    for n in range(1, coarse_grid.num_steps + 1):
        if continuity == "right":
            t = coarse_grid.nodes[n]
            m = int(np.searchsorted(fn, t - 0.5 * ref_grid.step(1)))
        else:
            t = coarse_grid.nodes[n - 1]
            m = int(np.searchsorted(fn, t + 0.5 * ref_grid.step(1)))
        m = min(max(m, 1), ref_grid.num_steps)
        triples.append((n, m, coarse_grid.step(n)))
    return triples


def _velocity_error_norms(coarse_rows, coarse_space, ref_rows, ref_ops,
                          triples, pair) -> dict[str, float]:
    """Cross-mesh velocity error norms by exact fine-mesh quadrature."""
    ref_space = ref_ops.spaces.velocity
    _, _, wdet, _ = ref_space.basis_tables(_RULE)
    same_mesh = coarse_space.mesh is ref_space.mesh
    l2_l2 = l2_h1 = linf_l2 = 0.0
    cached_n = None
    for n, m, tau in triples:
        if same_mesh:
            v = coarse_rows[n] - ref_rows[m]
            m_sq = float(v @ (ref_ops.M_v @ v))
            k_sq = float(v @ (ref_ops.K_v @ v))
        else:
            if cached_n != n:
                cf = FEField(coarse_space, coarse_rows[n])
                pv = ProlongedVelocity(cf, ref_space, pair.qtri, pair.qlam)
                cvals, cgrads = pv.values(), pv.gradients()
                cached_n = n
            rf = FEField(ref_space, ref_rows[m])
            rvals, rgrads = asm._values_and_gradients(rf)
            dv = cvals - rvals
            dg = cgrads - rgrads
            m_sq = float(np.einsum("tq,tqc,tqc->", wdet, dv, dv))
            k_sq = float(np.einsum("tq,tqcd,tqcd->", wdet, dg, dg))
        l2_l2 += tau * m_sq
        l2_h1 += tau * (m_sq + k_sq)
        linf_l2 = max(linf_l2, m_sq)
    return {"l2_l2": math.sqrt(max(l2_l2, 0.0)),
            "l2_h1": math.sqrt(max(l2_h1, 0.0)),
            "linf_l2": math.sqrt(max(linf_l2, 0.0))}


def _scalar_error_norms(coarse_rows, coarse_space, ref_rows, ref_ops,
                        triples, pair) -> dict[str, float]:
    """Cross-mesh scalar error norms via exact nodal prolongation."""
    ref_space = ref_ops.spaces.temperature
    same_mesh = coarse_space.mesh is ref_space.mesh
    l2_l2 = l2_h1 = linf_l2 = 0.0
    cached_n = None
    prol = None
    for n, m, tau in triples:
        if same_mesh:
            v = coarse_rows[n] - ref_rows[m]
        else:
            if cached_n != n:
                cf = FEField(coarse_space, coarse_rows[n])
                prol = values_at(cf, pair.vtri, pair.vlam)
                cached_n = n
            v = prol - ref_rows[m]
        m_sq = float(v @ (ref_ops.M_theta @ v))
        k_sq = float(v @ (ref_ops.K_theta @ v))
        l2_l2 += tau * m_sq
        l2_h1 += tau * (m_sq + k_sq)
        linf_l2 = max(linf_l2, m_sq)
    return {"l2_l2": math.sqrt(max(l2_l2, 0.0)),
            "l2_h1": math.sqrt(max(l2_h1, 0.0)),
            "linf_l2": math.sqrt(max(linf_l2, 0.0))}


def _control_error_norm(coarse: ControlField, ref: ControlField,
                        triples) -> float:
    """L2(I; L2(Gamma)) distance between controls on nested boundaries."""
    cgeo = coarse.geometry
    fgeo = ref.geometry
    same_geo = cgeo.mesh is fgeo.mesh
    total = 0.0
    for n, m, tau in triples:
        if same_geo:
            step_sq = 0.0
            for e in range(fgeo.num_edges):
                s, v = _merge([coarse.edge_polyline(n, e),
                               ref.edge_polyline(m, e)], [1.0, -1.0])
                step_sq += fgeo.lengths[e] * _product_integral(s, v, v)
        else:
            step_sq = 0.0
            for e in range(fgeo.num_edges):
                side = fgeo.sides[e]
                q0, q1 = fgeo.side_params[e]
                sc, vc = _coarse_polyline_on_fine_edge(coarse, n, side, q0, q1)
                s, v = _merge([(sc, vc), ref.edge_polyline(m, e)], [1.0, -1.0])
                step_sq += fgeo.lengths[e] * _product_integral(s, v, v)
        total += tau * step_sq
    return math.sqrt(max(total, 0.0))


def _coarse_polyline_on_fine_edge(coarse: ControlField, n: int, side: int,
                                  q0: float, q1: float
                                  ) -> tuple[np.ndarray, np.ndarray]:
    """Restrict the coarse trace to one fine edge, in fine-edge parameter."""
    cgeo = coarse.geometry
    lo, hi = (q0, q1) if q0 <= q1 else (q1, q0)
    e, t_lo, t_hi = cgeo.find_edge_on_side(side, lo, hi)
    s, v = coarse.edge_polyline(n, e)
    a, b = (t_lo, t_hi) if t_lo <= t_hi else (t_hi, t_lo)
    inner = s[(s > a + 1e-14) & (s < b - 1e-14)]
    ss = np.concatenate([[a], inner, [b]])
    vv = np.interp(ss, s, v)
    p0, p1 = cgeo.side_params[e]
    axis = p0 + ss * (p1 - p0)
    tf = (axis - q0) / (q1 - q0)
    order = np.argsort(tf)
    tf, vv = tf[order], vv[order]
    tf[0], tf[-1] = 0.0, 1.0
    return tf, vv


# ---------------------------------------------------------------------------
# study drivers


@dataclass
class _OptimalRun:
    level: int
    grid: TimeGrid
    operators: OperatorSet
    geometry: BoundaryGeometry
    control: ControlField
    state: object
    adjoint: object
    iterations: int
    objective: float
    converged: bool


def _optimize_once(params: PhysicalParams, data: ProblemData, level: int,
                   grid: TimeGrid, u0: Optional[ControlField],
                   tol: float, max_iter: int, solver_tol: float,
                   log: Callable[[str], None]) -> _OptimalRun:
    mesh = build_unit_square_mesh(level)
    spaces = build_space_set(mesh)
    ops = asm.assemble_operator_set(spaces, g=params.g)
    geo = BoundaryGeometry(spaces.temperature)
    if u0 is None:
        start = ControlField.zero(grid, geo)
    else:
        start = prolong_control(u0, grid, geo)
    result = projected_gradient(params, data, ops, grid, start, tol=tol,
                                max_iter=max_iter, solver_tol=solver_tol)
    if not result.converged:
        log(f"warning: level {level}, N={grid.num_steps}: optimizer hit "
            f"max_iter={max_iter} (residual {result.residuals[-1]:.2e})")
    state = solve_state(params, data, ops, grid, result.control,
                        tol=solver_tol)
    adj = solve_adjoint(params, data, ops, grid, state, tol=solver_tol)
    log(f"level {level}, N={grid.num_steps}: optimizer took "
        f"{result.iterations} iterations, J = {result.objective:.8e}")
    return _OptimalRun(level, grid, ops, geo, result.control, state, adj,
                       result.iterations, result.objective, result.converged)


def _errors_against_reference(run: _OptimalRun, ref: _OptimalRun,
                              sampling: str = "fine") -> dict[str, float]:
    same_mesh = run.operators.spaces.mesh is ref.operators.spaces.mesh
    pair = None
    if not same_mesh:
        pair = _MeshPair(run.operators.spaces.mesh,
                         ref.operators.spaces.velocity)
    right = _step_triples(run.grid, ref.grid, sampling, "right")
    left = _step_triples(run.grid, ref.grid, sampling, "left")
    vs = run.operators.spaces.velocity
    ts = run.operators.spaces.temperature
    out: dict[str, float] = {}
    y = _velocity_error_norms(run.state.velocity, vs, ref.state.velocity,
                              ref.operators, right, pair)
    th = _scalar_error_norms(run.state.temperature, ts, ref.state.temperature,
                             ref.operators, right, pair)
    mu = _velocity_error_norms(run.adjoint.mu, vs, ref.adjoint.mu,
                               ref.operators, left, pair)
    ka = _scalar_error_norms(run.adjoint.kappa, ts, ref.adjoint.kappa,
                             ref.operators, left, pair)
    out["y_linf_l2"] = y["linf_l2"]
    out["y_l2_l2"] = y["l2_l2"]
    out["y_l2_h1"] = y["l2_h1"]
    out["theta_linf_l2"] = th["linf_l2"]
    out["theta_l2_l2"] = th["l2_l2"]
    out["theta_l2_h1"] = th["l2_h1"]
    out["mu_linf_l2"] = mu["linf_l2"]
    out["mu_l2_l2"] = mu["l2_l2"]
    out["mu_l2_h1"] = mu["l2_h1"]
    out["kappa_linf_l2"] = ka["linf_l2"]
    out["kappa_l2_l2"] = ka["l2_l2"]
    out["kappa_l2_h1"] = ka["l2_h1"]
    out["u_l2_l2"] = _control_error_norm(run.control, ref.control, left)
    return out


def run_spatial_study(params: PhysicalParams, data: ProblemData,
                      coarse_levels: Sequence[int] = (2, 3, 4, 5),
                      ref_level: int = 6, num_steps: int = 128,
                      tol: float = 1e-6, max_iter: int = 200,
                      solver_tol: float = 1e-10,
                      log: Callable[[str], None] = lambda s: None,
                      threads: int = 1
                      ) -> tuple[EocTable, list[ErrorReport]]:
    """Optimize on a hierarchy of meshes at fixed time step and tabulate
    errors of the optimal quintuple against the finest level.

    With ``threads == 1`` the levels run in order and each warm-starts
    from the previous optimum (the fixed point does not depend on the
    initial iterate within the stopping tolerance); with more threads the
    levels run independently from cold starts and are merged in order.
    """
    grid = TimeGrid.uniform(data.horizon, num_steps)
    configs = [(level, grid) for level in coarse_levels] + [(ref_level, grid)]
    runs = _run_all(params, data, configs, tol, max_iter, solver_tol, log,
                    threads)
    ref = runs[-1]
    reports = [ErrorReport(r.level, num_steps,
                           _errors_against_reference(r, ref))
               for r in runs[:-1]]
    hs = [2.0 ** -level for level in coarse_levels]
    return make_eoc_table("h", hs, reports), reports


def run_temporal_study(params: PhysicalParams, data: ProblemData,
                       mesh_level: int = 5,
                       coarse_steps: Sequence[int] = (4, 8, 16, 32),
                       ref_steps: int = 256,
                       tol: float = 1e-6, max_iter: int = 200,
                       solver_tol: float = 1e-10,
                       log: Callable[[str], None] = lambda s: None,
                       threads: int = 1
                       ) -> tuple[EocTable, list[ErrorReport]]:
    """Optimize on a hierarchy of time grids at fixed mesh and tabulate
    errors of the optimal quintuple against the finest grid."""
    configs = [(mesh_level, TimeGrid.uniform(data.horizon, N))
               for N in (*coarse_steps, ref_steps)]
    runs = _run_all(params, data, configs, tol, max_iter, solver_tol, log,
                    threads)
    ref = runs[-1]
    reports = [ErrorReport(mesh_level, r.grid.num_steps,
                           _errors_against_reference(r, ref))
               for r in runs[:-1]]
    taus = [data.horizon / N for N in coarse_steps]
    return make_eoc_table("tau", taus, reports), reports


def _run_all(params, data, configs, tol, max_iter, solver_tol, log,
             threads) -> list[_OptimalRun]:
    if threads <= 1:
        runs = []
        warm: Optional[ControlField] = None
        for level, grid in configs:
            run = _optimize_once(params, data, level, grid, warm, tol,
                                 max_iter, solver_tol, log)
            runs.append(run)
            # a diverged iterate is a poor starting point for the next level
            warm = run.control if run.converged else None
        return runs
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_optimize_once, params, data, level, grid,
                               None, tol, max_iter, solver_tol, log)
                   for level, grid in configs]
        return [f.result() for f in futures]
