"""Backward-in-time adjoint sweep.

The adjoint scheme lives on the left-continuous shifted grid: step n
couples implicitly through the transposed convection at the lagged state
``y_{n-1}`` and explicitly, weighted by ``tau_{n+1}/tau_n``, through the
step-(n+1) state and adjoint values.  Terminal ghost values vanish and
the state is extended by ``y_{N+1} := y_N``, ``theta_{N+1} := theta_N``.

The right-hand side uses the same interval-averaged targets as the
discrete objective, which makes this sweep the exact transpose of the
linearized forward map; the duality identity in the test suite checks
that to solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly as asm
from .assembly import OperatorSet
from .fem import FEField
from .forward import (PhysicalParams, ProblemData, StateTrajectory, TimeGrid,
                      _averaged_load, _reduced)
from .linsolve import SaddleSystem, solve_saddle, solve_sparse

__all__ = ["AdjointTrajectory", "solve_adjoint"]


@dataclass(eq=False)
class AdjointTrajectory:
    """Adjoint coefficients, left-continuous piecewise constant in time.

    Row n holds the values on ``[t_{n-1}, t_n)`` for n = 1..N; row N+1
    is the zero terminal ghost and row 0 is unused.
    """

    grid: TimeGrid
    operators: OperatorSet
    mu: np.ndarray
    adj_pressure: np.ndarray
    kappa: np.ndarray

    def mu_field(self, n: int) -> FEField:
        return FEField(self.operators.spaces.velocity, self.mu[n])

    def kappa_field(self, n: int) -> FEField:
        return FEField(self.operators.spaces.temperature, self.kappa[n])


def solve_adjoint(params: PhysicalParams, data: ProblemData,
                  operators: OperatorSet, grid: TimeGrid,
                  state: StateTrajectory,
                  tol: float = 1e-10) -> AdjointTrajectory:
    """Solve the discrete adjoint equations backward over the grid."""
    spaces = operators.spaces
    red = _reduced(operators)
    N = grid.num_steps
    nv = spaces.velocity.ndof
    ntheta = spaces.temperature.ndof

    mu = np.zeros((N + 2, nv))
    lam = np.zeros((N + 1, operators.B.shape[0]))
    kappa = np.zeros((N + 2, ntheta))

    yd_cache: dict = {}
    thd_cache: dict = {}
    ix_free = np.ix_(red.free, red.free)
    for n in range(N, 0, -1):
        tau = grid.step(n)
        ratio = grid.step(n + 1) / tau
        y_prev = state.velocity_field(n - 1)
        # ghost extension of the state beyond the horizon
        y_next = state.velocity_field(min(n + 1, N))
        theta_next = state.temperature_field(min(n + 1, N))
        mu_next = FEField(spaces.velocity, mu[n + 1])
        kappa_next = FEField(spaces.temperature, kappa[n + 1])

        N_v = asm.assemble_convection_velocity(y_prev)
        N_th = asm.assemble_convection_scalar(spaces.temperature, y_prev)

        A = (red.M_ff / tau + params.nu * red.K_ff
             + N_v.T.tocsr()[ix_free])
        rhs_v = (operators.M_v @ mu[n + 1]) / tau
        rhs_v -= ratio * asm.assemble_trilinear_vector(
            "velocity", y_next, mu_next)
        rhs_v -= ratio * asm.assemble_trilinear_vector(
            "scalar", theta_next, kappa_next, velocity=spaces.velocity)
        rhs_v += operators.M_v @ state.velocity[n]
        rhs_v -= _averaged_load(spaces.velocity, data.target_velocity, grid, n,
                                yd_cache)
        try:
            mu_free, lam_n = solve_saddle(
                SaddleSystem(A, red.B_f, operators.pressure_mean,
                             local_dofs=red.bubble_pos),
                rhs_v[red.free], tol=tol)
        except Exception as exc:
            raise RuntimeError(f"adjoint velocity solve failed at step {n}") \
                from exc
        mu[n, red.free] = mu_free
        lam[n] = lam_n

        H = (operators.M_theta / tau + params.chi * operators.K_theta
             + N_th.T.tocsr()
             + params.eta * params.gamma * operators.B_gamma)
        rhs_t = (operators.M_theta @ kappa[n + 1]) / tau
        rhs_t -= ratio * params.beta * (operators.G.T @ mu[n + 1])
        rhs_t += operators.M_theta @ state.temperature[n]
        rhs_t -= _averaged_load(spaces.temperature, data.target_temperature,
                                grid, n, thd_cache)
        try:
            kappa[n] = solve_sparse(H, rhs_t, tol=tol).x
        except Exception as exc:
            raise RuntimeError(f"adjoint temperature solve failed at step {n}") \
                from exc

    return AdjointTrajectory(grid, operators, mu, lam, kappa)
