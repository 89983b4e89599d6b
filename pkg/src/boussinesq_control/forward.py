"""Forward time stepping of the coupled flow/heat system.

Each step of the scheme is linear: the convecting velocity and the
buoyancy temperature are lagged one step, the diffusive parts are
implicit, and the velocity and heat solves decouple.  The same marching
code also drives the linearization used by gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import assembly as asm
from .assembly import OperatorSet, time_average_function
from .fem import FEField, FunctionSpace, load_vector
from .linsolve import SaddleSystem, solve_saddle, solve_sparse

__all__ = [
    "PhysicalParams",
    "TimeGrid",
    "SpaceTimeFn",
    "ProblemData",
    "StateTrajectory",
    "project_initial_state",
    "solve_state",
    "solve_linearized_state",
    "energy_bound_report",
]


@dataclass(frozen=True, eq=False)
class PhysicalParams:
    """Scalar coefficients of the PDE system and the cost functional."""

    nu: float
    chi: float
    beta: float
    g: np.ndarray
    gamma: float
    eta: float
    alpha: float
    u_a: float = -np.inf
    u_b: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        if self.g.shape != (2,):
            raise ValueError("gravity must be a 2-vector")
        for name in ("nu", "chi", "gamma", "eta", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.u_a < self.u_b:
            raise ValueError("control bounds must satisfy u_a < u_b")


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Partition 0 = t_0 < ... < t_N = T with mildly varying steps.

    Construction validates quasi-uniformity (``max step < eps0 * every
    step``) and smooth variation (``|tau_n - tau_{n-1}| <= eps1 * tau^2``).
    The ghost step ``tau_{N+1} := tau_N`` backs the final adjoint step.
    """

    nodes: np.ndarray
    eps0: float = 8.0
    eps1: float = 4.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        nodes.setflags(write=False)
        steps = np.diff(nodes)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise ValueError("a time grid needs at least one step")
        if nodes[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(steps <= 0):
            raise ValueError("time nodes must be strictly increasing")
        tau = steps.max()
        if np.any(tau >= self.eps0 * steps):
            raise ValueError(
                f"quasi-uniformity violated: max/min step ratio "
                f"{tau / steps.min():.3g} >= eps0={self.eps0}")
        if len(steps) > 1:
            jump = np.abs(np.diff(steps)).max()
            if jump > self.eps1 * tau ** 2:
                raise ValueError(
                    f"step variation {jump:.3g} exceeds eps1*tau^2 = "
                    f"{self.eps1 * tau ** 2:.3g}")

    @classmethod
    def uniform(cls, T: float, num_steps: int, **kw) -> "TimeGrid":
        return cls(np.arange(num_steps + 1) * (T / num_steps), **kw)

    @classmethod
    def graded(cls, T: float, num_steps: int, r: float = 1.2, **kw) -> "TimeGrid":
        """Smoothly graded nodes ``T * (n/N)**r``, denser near t = 0."""
        return cls(T * (np.arange(num_steps + 1) / num_steps) ** r, **kw)

    @property
    def num_steps(self) -> int:
        return len(self.nodes) - 1

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def tau_max(self) -> float:
        return float(self.steps.max())

    def step(self, n: int) -> float:
        """tau_n for n = 1..N, with the ghost value at n = N+1."""
        N = self.num_steps
        if n == N + 1:
            return float(self.nodes[N] - self.nodes[N - 1])
        if not 1 <= n <= N:
            raise IndexError(f"step index {n} out of range 1..{N + 1}")
        return float(self.nodes[n] - self.nodes[n - 1])


@dataclass(frozen=True)
class SpaceTimeFn:
    """Vectorized space-time data ``fn(t, x, y)``.

    ``constant_in_time`` lets the steppers cache interval averages.
    """

    fn: Callable
    constant_in_time: bool = False

    def __call__(self, t, x, y):
        return self.fn(t, x, y)

    @staticmethod
    def spatial(g: Callable) -> "SpaceTimeFn":
        return SpaceTimeFn(lambda t, x, y: g(x, y), constant_in_time=True)

    @staticmethod
    def zero_scalar() -> "SpaceTimeFn":
        return SpaceTimeFn(lambda t, x, y: np.zeros_like(x),
                           constant_in_time=True)

    @staticmethod
    def zero_vector() -> "SpaceTimeFn":
        return SpaceTimeFn(lambda t, x, y: np.zeros((len(x), 2)),
                           constant_in_time=True)


def zero_spatial_scalar(x, y):
    return np.zeros_like(x)


def zero_spatial_vector(x, y):
    return np.zeros((len(x), 2))


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Body force, heat source, initial values, targets and horizon."""

    body_force: SpaceTimeFn
    heat_source: SpaceTimeFn
    initial_velocity: Callable
    initial_temperature: Callable
    target_velocity: SpaceTimeFn
    target_temperature: SpaceTimeFn
    horizon: float

    @classmethod
    def zero(cls, horizon: float = 1.0) -> "ProblemData":
        return cls(SpaceTimeFn.zero_vector(), SpaceTimeFn.zero_scalar(),
                   zero_spatial_vector, zero_spatial_scalar,
                   SpaceTimeFn.zero_vector(), SpaceTimeFn.zero_scalar(),
                   horizon)


@dataclass(eq=False)
class StateTrajectory:
    """Per-step coefficients, right-continuous piecewise constant in time.

    Row n holds the values on ``(t_{n-1}, t_n]``; row 0 holds the
    projected initial data (the pressure row 0 is unused and zero).
    """

    grid: TimeGrid
    operators: OperatorSet
    velocity: np.ndarray
    pressure: np.ndarray
    temperature: np.ndarray

    def velocity_field(self, n: int) -> FEField:
        return FEField(self.operators.spaces.velocity, self.velocity[n])

    def temperature_field(self, n: int) -> FEField:
        return FEField(self.operators.spaces.temperature, self.temperature[n])


class _Reduced:
    """Velocity operators restricted to the non-Dirichlet DOFs."""

    def __init__(self, ops: OperatorSet):
        space = ops.spaces.velocity
        free = space.free_dofs
        self.free = free
        ix = np.ix_(free, free)
        self.M_ff = ops.M_v[ix].tocsr()
        self.K_ff = ops.K_v[ix].tocsr()
        self.B_f = ops.B[:, free].tocsr()
        # bubble positions within the free set: their mutual coupling is
        # diagonal, so the saddle solver eliminates them exactly
        nv = space.mesh.num_vertices
        nt = space.mesh.num_triangles
        bubbles = np.concatenate([nv + np.arange(nt),
                                  space.ncomp_dof + nv + np.arange(nt)])
        self.bubble_pos = np.searchsorted(free, bubbles)


@lru_cache(maxsize=None)
def _reduced(ops: OperatorSet) -> _Reduced:
    return _Reduced(ops)


def _averaged_load(space: FunctionSpace, data: SpaceTimeFn, grid: TimeGrid,
                   n: int, cache: dict) -> np.ndarray:
    """Load vector of the interval average of ``data`` on step n."""
    if data.constant_in_time:
        if "const" not in cache:
            t0 = grid.nodes[0]
            cache["const"] = load_vector(
                space, lambda x, y: data(t0, x, y))
        return cache["const"]
    return load_vector(space, time_average_function(data, grid, n))


def project_initial_state(data: ProblemData, operators: OperatorSet,
                          tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """L2-project initial data onto the discrete spaces.

    The velocity projection targets the discretely divergence-free
    subspace, which takes one mass-matrix saddle solve; the analytic
    initial velocity is assumed divergence-free with zero trace.
    """
    spaces = operators.spaces
    red = _reduced(operators)
    rhs = load_vector(spaces.velocity, data.initial_velocity)[red.free]
    y0_free, _ = solve_saddle(
        SaddleSystem(red.M_ff, red.B_f, operators.pressure_mean,
                     local_dofs=red.bubble_pos), rhs, tol=tol)
    y0 = np.zeros(spaces.velocity.ndof)
    y0[red.free] = y0_free
    theta_rhs = load_vector(spaces.temperature, data.initial_temperature)
    theta0 = solve_sparse(operators.M_theta, theta_rhs, tol=tol).x
    return y0, theta0


def solve_state(params: PhysicalParams, data: ProblemData,
                operators: OperatorSet, grid: TimeGrid, control,
                initial: Optional[tuple[np.ndarray, np.ndarray]] = None,
                tol: float = 1e-10) -> StateTrajectory:
    """March the state scheme over the whole grid.

    ``control`` provides ``boundary_load(space, n)``, the integrals of the
    interval-n control against the P1 boundary traces.  ``initial``
    overrides the projected initial data (used to restart mid-trajectory).
    """
    spaces = operators.spaces
    red = _reduced(operators)
    nv = spaces.velocity.ndof
    ntheta = spaces.temperature.ndof
    N = grid.num_steps

    y = np.zeros((N + 1, nv))
    p = np.zeros((N + 1, operators.B.shape[0]))
    theta = np.zeros((N + 1, ntheta))
    if initial is not None:
        y[0], theta[0] = initial
    else:
        y[0], theta[0] = project_initial_state(data, operators, tol=tol)

    h_cache: dict = {}
    f_cache: dict = {}
    for n in range(1, N + 1):
        tau = grid.step(n)
        y_prev = FEField(spaces.velocity, y[n - 1])
        N_v = asm.assemble_convection_velocity(y_prev)
        N_th = asm.assemble_convection_scalar(spaces.temperature, y_prev)

        A = (red.M_ff / tau + params.nu * red.K_ff
             + N_v[np.ix_(red.free, red.free)])
        rhs_v = (operators.M_v @ y[n - 1]) / tau
        rhs_v -= params.beta * (operators.G @ theta[n - 1])
        rhs_v += _averaged_load(spaces.velocity, data.body_force, grid, n,
                                h_cache)
        try:
            y_free, p_n = solve_saddle(
                SaddleSystem(A, red.B_f, operators.pressure_mean,
                             local_dofs=red.bubble_pos),
                rhs_v[red.free], tol=tol)
        except Exception as exc:
            raise RuntimeError(f"velocity solve failed at step {n}") from exc
        y[n, red.free] = y_free
        p[n] = p_n

        H = (operators.M_theta / tau + params.chi * operators.K_theta
             + N_th + params.eta * params.gamma * operators.B_gamma)
        rhs_t = (operators.M_theta @ theta[n - 1]) / tau
        rhs_t += _averaged_load(spaces.temperature, data.heat_source, grid, n,
                                f_cache)
        rhs_t += params.eta * control.boundary_load(spaces.temperature, n)
        try:
            theta[n] = solve_sparse(H, rhs_t, tol=tol).x
        except Exception as exc:
            raise RuntimeError(f"temperature solve failed at step {n}") from exc

    return StateTrajectory(grid, operators, y, p, theta)


def solve_linearized_state(params: PhysicalParams, operators: OperatorSet,
                           grid: TimeGrid, base: StateTrajectory, direction,
                           tol: float = 1e-10) -> StateTrajectory:
    """Linearization of :func:`solve_state` around ``base`` at a control
    perturbation ``direction`` (same boundary-load interface), with zero
    initial data and coefficients frozen at the base trajectory."""
    spaces = operators.spaces
    red = _reduced(operators)
    N = grid.num_steps
    z = np.zeros((N + 1, spaces.velocity.ndof))
    lam = np.zeros((N + 1, operators.B.shape[0]))
    xi = np.zeros((N + 1, spaces.temperature.ndof))

    for n in range(1, N + 1):
        tau = grid.step(n)
        y_prev = base.velocity_field(n - 1)
        z_prev = FEField(spaces.velocity, z[n - 1])
        N_v = asm.assemble_convection_velocity(y_prev)
        N_th = asm.assemble_convection_scalar(spaces.temperature, y_prev)
        N_vz = asm.assemble_convection_velocity(z_prev)
        N_thz = asm.assemble_convection_scalar(spaces.temperature, z_prev)

        A = (red.M_ff / tau + params.nu * red.K_ff
             + N_v[np.ix_(red.free, red.free)])
        rhs_v = (operators.M_v @ z[n - 1]) / tau
        rhs_v -= N_vz @ base.velocity[n]
        rhs_v -= params.beta * (operators.G @ xi[n - 1])
        try:
            z_free, lam_n = solve_saddle(
                SaddleSystem(A, red.B_f, operators.pressure_mean,
                             local_dofs=red.bubble_pos),
                rhs_v[red.free], tol=tol)
        except Exception as exc:
            raise RuntimeError(
                f"linearized velocity solve failed at step {n}") from exc
        z[n, red.free] = z_free
        lam[n] = lam_n

        H = (operators.M_theta / tau + params.chi * operators.K_theta
             + N_th + params.eta * params.gamma * operators.B_gamma)
        rhs_t = (operators.M_theta @ xi[n - 1]) / tau
        rhs_t -= N_thz @ base.temperature[n]
        rhs_t += params.eta * direction.boundary_load(spaces.temperature, n)
        try:
            xi[n] = solve_sparse(H, rhs_t, tol=tol).x
        except Exception as exc:
            raise RuntimeError(
                f"linearized temperature solve failed at step {n}") from exc

    return StateTrajectory(grid, operators, z, lam, xi)


def energy_bound_report(params: PhysicalParams, data: ProblemData,
                        operators: OperatorSet, grid: TimeGrid, control,
                        traj: StateTrajectory) -> dict:
    """Check the discrete energy estimate along a computed trajectory.

    Tests, for every k,

        ||y_k||^2 + ||th_k||^2 + sum_{n<=k} (2 nu tau_n |y_n|_1^2
            + 2 chi tau_n |th_n|_1^2 + eta gamma tau_n ||th_n||_G^2)
        <= bound_k,

    where ``bound_k`` is assembled from the data alone by the discrete
    Gronwall recursion with explicit constants (valid whenever
    ``(beta |g| + 1) tau_n < 1``, enforced here).  Returns the two arrays
    and a satisfaction flag.
    """
    ops = operators
    N = grid.num_steps
    c = params.beta * float(np.linalg.norm(params.g)) + 1.0
    taus = grid.steps
    if np.any(c * taus >= 1.0):
        raise ValueError("energy bound requires (beta |g| + 1) tau_n < 1")

    def sq(M, v):
        return float(v @ (M @ v))

    a = np.empty(N + 1)
    lhs = np.empty(N + 1)
    a[0] = sq(ops.M_v, traj.velocity[0]) + sq(ops.M_theta, traj.temperature[0])
    lhs[0] = a[0]
    diss = 0.0
    s = np.zeros(N + 1)
    h_cache: dict = {}
    f_cache: dict = {}
    spaces = ops.spaces
    for n in range(1, N + 1):
        tau = grid.step(n)
        yn = traj.velocity[n]
        thn = traj.temperature[n]
        a[n] = sq(ops.M_v, yn) + sq(ops.M_theta, thn)
        diss += (2 * params.nu * tau * sq(ops.K_v, yn)
                 + 2 * params.chi * tau * sq(ops.K_theta, thn)
                 + params.eta * params.gamma * tau * sq(ops.B_gamma, thn))
        lhs[n] = a[n] + diss
        # data sources: ||h^n||^2, ||f^n||^2 via mass-solve-free quadrature
        hn = _averaged_data_l2sq(spaces.velocity, data.body_force, grid, n,
                                 h_cache)
        fn = _averaged_data_l2sq(spaces.temperature, data.heat_source, grid, n,
                                 f_cache)
        un = control.l2_gamma_sq(n)
        s[n] = tau * (hn + fn) + (params.eta / params.gamma) * tau * un

    bound_a = np.empty(N + 1)
    bound_a[0] = a[0]
    for n in range(1, N + 1):
        tau = grid.step(n)
        rho = (1.0 + c * tau) / (1.0 - c * tau)
        bound_a[n] = rho * bound_a[n - 1] + s[n] / (1.0 - c * tau)
    bound = np.empty(N + 1)
    bound[0] = a[0]
    extra = 0.0
    for n in range(1, N + 1):
        tau = grid.step(n)
        extra += c * tau * (bound_a[n] + bound_a[n - 1]) + s[n]
        bound[n] = bound_a[0] + extra + bound_a[n]
    ok = bool(np.all(np.isfinite(lhs)) and np.all(lhs <= bound + 1e-12))
    return {"lhs": lhs, "bound": bound, "satisfied": ok}


def _averaged_data_l2sq(space: FunctionSpace, data: SpaceTimeFn,
                        grid: TimeGrid, n: int, cache: dict) -> float:
    """Quadrature value of ``||interval average of data||^2`` on step n."""
    from .fem import quadrature_rule, DEFAULT_CELL_DEGREE
    rule = quadrature_rule(DEFAULT_CELL_DEGREE)
    _, _, wdet, phys = space.basis_tables(rule)
    x = phys[:, :, 0].ravel()
    y = phys[:, :, 1].ravel()
    key = "const" if data.constant_in_time else n
    if key not in cache:
        if data.constant_in_time:
            vals = np.asarray(data(grid.nodes[0], x, y), dtype=float)
        else:
            vals = np.asarray(
                time_average_function(data, grid, n)(x, y), dtype=float)
        if vals.ndim == 2:
            sqv = (vals ** 2).sum(axis=1)
        else:
            sqv = vals ** 2
        cache[key] = float((wdet.ravel() * sqv).sum())
    return cache[key]
