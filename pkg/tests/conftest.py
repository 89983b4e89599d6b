import numpy as np
import pytest

from boussinesq_control import (PhysicalParams, TimeGrid, assemble_operator_set,
                                build_space_set, build_unit_square_mesh)
from boussinesq_control.cli import vortex_preset
from boussinesq_control.control_opt import BoundaryGeometry, ControlField


@pytest.fixture(scope="session")
def preset():
    return vortex_preset()


class Setup:
    """One mesh/space/operator bundle plus grid and boundary helpers."""

    def __init__(self, level, num_steps, params, horizon=1.0, grading=1.0):
        self.mesh = build_unit_square_mesh(level)
        self.spaces = build_space_set(self.mesh)
        self.ops = assemble_operator_set(self.spaces, g=params.g)
        if grading == 1.0:
            self.grid = TimeGrid.uniform(horizon, num_steps)
        else:
            self.grid = TimeGrid.graded(horizon, num_steps, grading)
        self.geometry = BoundaryGeometry(self.spaces.temperature)
        self.params = params

    def zero_control(self):
        return ControlField.zero(self.grid, self.geometry)

    def random_control(self, rng, scale=1.0):
        nb = len(self.geometry.bvertices)
        return ControlField.raw(
            self.grid, self.geometry,
            scale * rng.standard_normal((self.grid.num_steps, nb)))


@pytest.fixture
def make_setup():
    def _make(level, num_steps, params=None, horizon=1.0, grading=1.0):
        if params is None:
            params = PhysicalParams(nu=0.1, chi=1.0, beta=1.0, g=(-10.0, 10.0),
                                    gamma=1.0, eta=1.0, alpha=0.1,
                                    u_a=-0.2, u_b=0.2)
        return Setup(level, num_steps, params, horizon, grading)
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
