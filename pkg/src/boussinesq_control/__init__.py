"""Optimal Robin boundary control of the time-dependent Boussinesq equations.

A 2D finite-element toolkit: Mini/P1 spaces on structured unit-square
meshes, an implicit-explicit state solver, the exactly dual discrete
adjoint, a projected-gradient optimizer under variational discretization,
and convergence-study drivers.
"""

from .mesh import Mesh, build_unit_square_mesh, refine_uniform, boundary_arc_length
from .fem import (FEField, FunctionSpace, QuadratureRule, SpaceKind,
                  build_space, quadrature_rule, l2_project, evaluate_field)
from .assembly import (OperatorSet, SpaceSet, assemble_operator_set,
                       assemble_convection_velocity, assemble_convection_scalar,
                       assemble_trilinear_vector, build_space_set, time_average)
from .linsolve import (LinearSolution, LinearSolverError, SaddleSystem,
                       solve_saddle, solve_sparse)
from .forward import (PhysicalParams, ProblemData, SpaceTimeFn, StateTrajectory,
                      TimeGrid, solve_state, solve_linearized_state)
from .adjoint import AdjointTrajectory, solve_adjoint
from .control_opt import (BoundaryGeometry, ControlCombination, ControlField,
                          OptResult, gradient_trace, objective, project_control,
                          projected_gradient)

__version__ = "0.1.0"
