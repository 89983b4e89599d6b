import numpy as np
import pytest

from boussinesq_control.adjoint import solve_adjoint
from boussinesq_control.control_opt import (ControlCombination, ControlField,
                                            gamma_diff_norm_sq, gamma_inner,
                                            gradient_trace, objective,
                                            project_control,
                                            projected_gradient,
                                            spacetime_diff_norm,
                                            spacetime_inner)
from boussinesq_control.forward import ProblemData, solve_state


def reduced_objective(params, data, s, control, tol=1e-10):
    state = solve_state(params, data, s.ops, s.grid, control, tol=tol)
    return objective(params, data, s.grid, state, control)


class TestProjection:
    def test_clamp_values(self, make_setup):
        s = make_setup(0, 2)
        nb = len(s.geometry.bvertices)
        u = ControlField.raw(s.grid, s.geometry, np.full((2, nb), 0.35))
        p = project_control(u, (-0.2, 0.2))
        sA, vA = p.edge_polyline(1, 0)
        assert np.allclose(vA, 0.2)
        u2 = ControlField.raw(s.grid, s.geometry, np.full((2, nb), -0.05))
        p2 = project_control(u2, (-0.2, 0.2))
        _, v2 = p2.edge_polyline(1, 0)
        assert np.allclose(v2, -0.05)

    def test_idempotent(self, make_setup, rng):
        s = make_setup(1, 3)
        u = s.random_control(rng)
        p1 = project_control(u, (-0.3, 0.4))
        p2 = project_control(p1, (-0.3, 0.4))
        for n in range(1, 4):
            assert gamma_diff_norm_sq(p1, p2, n) <= 1e-28

    def test_nonexpansive_pointwise(self, make_setup, rng):
        s = make_setup(1, 2)
        a = s.random_control(rng)
        b = s.random_control(rng)
        pa = project_control(a, (-0.5, 0.5))
        pb = project_control(b, (-0.5, 0.5))
        ss = np.linspace(0, 1, 17)
        for e in range(s.geometry.num_edges):
            sa, va = a.edge_polyline(1, e)
            sb, vb = b.edge_polyline(1, e)
            spa, vpa = pa.edge_polyline(1, e)
            spb, vpb = pb.edge_polyline(1, e)
            fa = np.interp(ss, sa, va)
            fb = np.interp(ss, sb, vb)
            fpa = np.interp(ss, spa, vpa)
            fpb = np.interp(ss, spb, vpb)
            assert np.all(np.abs(fpa - fpb) <= np.abs(fa - fb) + 1e-14)

    def test_invalid_bounds(self, make_setup):
        s = make_setup(0, 1)
        with pytest.raises(ValueError):
            project_control(s.zero_control(), (0.2, -0.2))

    def test_clamped_edge_integral_breakpoint_exact(self, make_setup):
        """Trace 0 -> 0.5 on a unit edge, clamped at 0.2: the kink at
        s = 0.4 is integrated exactly; a composite Simpson oracle whose
        grid contains the kink agrees to rounding."""
        s = make_setup(0, 1)  # level-0 mesh has unit-length edges
        nb = len(s.geometry.bvertices)
        vals = np.zeros((1, nb))
        geo = s.geometry
        e = 0
        ia, ib = geo.edge_b[e]
        vals[0, ia] = 0.0
        vals[0, ib] = 0.5
        u = ControlField(s.grid, geo, vals, mode="clamped", bounds=(-0.2, 0.2))
        ss, vv = u.edge_polyline(1, e)
        assert any(abs(x - 0.4) < 1e-14 for x in ss)
        from boussinesq_control.control_opt import _product_integral
        got = geo.lengths[e] * _product_integral(ss, vv, vv)
        # composite Simpson with 50 panels on [0, 1]; 0.4 is a panel edge
        def f(x):
            return np.clip(0.5 * x, -0.2, 0.2) ** 2
        xs = np.linspace(0, 1, 101)
        fx = f(xs)
        hpanel = xs[2] - xs[0]
        simpson = (hpanel / 6) * (fx[0:-1:2] + 4 * fx[1::2] + fx[2::2]).sum()
        exact_piece = 0.25 * 0.4 ** 3 / 3 + 0.04 * 0.6
        assert abs(got - simpson) <= 1e-14
        assert abs(got - exact_piece) <= 1e-14


class TestGammaIntegrals:
    def test_constant_norm(self, make_setup):
        s = make_setup(1, 2)
        nb = len(s.geometry.bvertices)
        u = ControlField.raw(s.grid, s.geometry, np.full((2, nb), 3.0))
        assert abs(u.l2_gamma_sq(1) - 9.0 * 4.0) <= 1e-13

    def test_boundary_load_constant_matches_mass(self, make_setup):
        s = make_setup(2, 2)
        nb = len(s.geometry.bvertices)
        c = 0.7
        u = ControlField.raw(s.grid, s.geometry, np.full((2, nb), c))
        load = u.boundary_load(s.spaces.temperature, 1)
        ref = c * (s.ops.B_gamma @ np.ones(s.spaces.temperature.ndof))
        assert np.abs(load - ref).max() <= 1e-14

    def test_boundary_load_p1_matches_mass(self, make_setup, rng):
        s = make_setup(2, 1)
        u = s.random_control(rng)
        load = u.boundary_load(s.spaces.temperature, 1)
        full = np.zeros(s.spaces.temperature.ndof)
        full[s.geometry.bvertices] = u.nodal(1)
        ref = s.ops.B_gamma @ full
        assert np.abs(load - ref).max() <= 1e-13

    def test_inner_bilinear(self, make_setup, rng):
        s = make_setup(1, 2)
        a = s.random_control(rng)
        b = s.random_control(rng)
        c = s.random_control(rng)
        ab = ControlCombination([(2.0, a), (-1.5, b)])
        lhs = gamma_inner(ab, c, 1)
        rhs = 2.0 * gamma_inner(a, c, 1) - 1.5 * gamma_inner(b, c, 1)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(rhs), 1)

    def test_diff_norm_matches_expansion(self, make_setup, rng):
        s = make_setup(1, 2)
        a = s.random_control(rng)
        b = s.random_control(rng)
        d2 = gamma_diff_norm_sq(a, b, 1)
        expanded = a.l2_gamma_sq(1) - 2 * gamma_inner(a, b, 1) + b.l2_gamma_sq(1)
        assert abs(d2 - expanded) <= 1e-12 * max(d2, 1)


class TestObjective:
    def test_zero_everything(self, make_setup, preset):
        params, _ = preset
        data = ProblemData.zero()
        s = make_setup(2, 4, params=params)
        u = s.zero_control()
        assert reduced_objective(params, data, s, u) == pytest.approx(0.0,
                                                                      abs=1e-30)

    def test_tracked_state_only_control_term(self, make_setup, rng, preset):
        """With targets equal to the reached states the tracking part
        drops and J reduces to the control penalty."""
        from boussinesq_control.fem import FEField, values_at
        from boussinesq_control.forward import SpaceTimeFn
        params, data = preset
        s = make_setup(2, 4, params=params)
        u = s.random_control(rng, 0.1)
        state = solve_state(params, data, s.ops, s.grid, u)

        def field_at(rows, space, t, x, y):
            n = min(max(int(np.searchsorted(s.grid.nodes, t)), 1),
                    s.grid.num_steps)
            tri, lam = s.mesh.locate_points(np.column_stack([x, y]))
            return values_at(FEField(space, rows[n]), tri, lam)

        tracked = ProblemData(
            data.body_force, data.heat_source, data.initial_velocity,
            data.initial_temperature,
            SpaceTimeFn(lambda t, x, y: field_at(state.velocity,
                                                 s.spaces.velocity, t, x, y)),
            SpaceTimeFn(lambda t, x, y: field_at(state.temperature,
                                                 s.spaces.temperature,
                                                 t, x, y)),
            data.horizon)
        J = objective(params, tracked, s.grid, state, u)
        control_term = 0.5 * params.alpha * sum(
            s.grid.step(n) * u.l2_gamma_sq(n)
            for n in range(1, s.grid.num_steps + 1))
        assert abs(J - control_term) <= 1e-12 * max(control_term, 1.0)

    def test_matches_independent_quadrature(self, make_setup, preset):
        """J at u = 0 re-evaluated by direct quadrature of |y - y_d^n|^2
        instead of the mass/load decomposition."""
        from boussinesq_control.fem import quadrature_rule
        params, data = preset
        s = make_setup(3, 16, params=params)
        u = s.zero_control()
        state = solve_state(params, data, s.ops, s.grid, u)
        J = objective(params, data, s.grid, state, u)

        from boussinesq_control.assembly import _values_and_gradients
        from boussinesq_control.fem import FEField
        rule = quadrature_rule(8)
        _, _, wdet, phys = s.spaces.velocity.basis_tables(rule)
        x = phys[:, :, 0].ravel()
        y = phys[:, :, 1].ravel()
        J_direct = 0.0
        for n in range(1, s.grid.num_steps + 1):
            tau = s.grid.step(n)
            yd = data.target_velocity(0.0, x, y).reshape(wdet.shape + (2,))
            yf = FEField(s.spaces.velocity, state.velocity[n])
            yv, _ = _values_and_gradients(yf)
            track_v = float((wdet * ((yv - yd) ** 2).sum(axis=2)).sum())
            tf = FEField(s.spaces.temperature, state.temperature[n])
            tv, _ = _values_and_gradients(tf)
            track_t = float((wdet * tv ** 2).sum())
            J_direct += tau * 0.5 * (track_v + track_t)
        assert abs(J - J_direct) <= 1e-12 * max(J_direct, 1.0)


class TestGradient:
    def test_kappa_zero_gives_alpha_u(self, make_setup, rng, preset):
        params, data = preset
        s = make_setup(1, 3, params=params)
        u = s.random_control(rng)
        state = solve_state(params, ProblemData.zero(), s.ops, s.grid,
                            s.zero_control())
        adj = solve_adjoint(params, ProblemData.zero(), s.ops, s.grid, state)
        assert np.all(adj.kappa == 0.0)
        g = gradient_trace(params, adj, u)
        for n in (1, 2):
            for e in range(s.geometry.num_edges):
                sg, vg = g.edge_polyline(n, e)
                su, vu = u.edge_polyline(n, e)
                assert np.allclose(vg, params.alpha * np.interp(sg, su, vu),
                                   atol=1e-14)

    def test_u_zero_gives_eta_kappa(self, make_setup, rng, preset):
        params, data = preset
        s = make_setup(2, 4, params=params)
        u = s.zero_control()
        state = solve_state(params, data, s.ops, s.grid, u)
        adj = solve_adjoint(params, data, s.ops, s.grid, state)
        g = gradient_trace(params, adj, u)
        for e in range(0, s.geometry.num_edges, 3):
            sg, vg = g.edge_polyline(2, e)
            ia, ib = s.geometry.edge_b[e]
            kap = adj.kappa[2][s.geometry.bvertices]
            expected = np.interp(sg, [0, 1], [kap[ia], kap[ib]])
            assert np.allclose(vg, params.eta * expected, atol=1e-14)

    def test_fd_consistency_and_eps_sweep(self, make_setup, rng, preset):
        params, data = preset
        s = make_setup(2, 8, params=params)
        for pair in range(3):
            u = s.random_control(rng, 0.05)
            v = s.random_control(rng)
            state = solve_state(params, data, s.ops, s.grid, u)
            adj = solve_adjoint(params, data, s.ops, s.grid, state)
            g = gradient_trace(params, adj, u)
            dj = spacetime_inner(g, v, s.grid)
            errors = {}
            for eps in (1e-2, 1e-3, 1e-4, 1e-5):
                jp = reduced_objective(
                    params, data, s, ControlCombination([(1.0, u), (eps, v)]))
                jm = reduced_objective(
                    params, data, s, ControlCombination([(1.0, u), (-eps, v)]))
                fd = (jp - jm) / (2 * eps)
                errors[eps] = abs(fd - dj) / abs(fd)
            # second-order decay until rounding noise takes over
            assert errors[1e-3] <= 0.05 * errors[1e-2]
            assert errors[1e-4] <= 0.05 * errors[1e-3]
            assert errors[1e-5] <= 1e-6


class TestProjectedGradient:
    def test_zero_data_converges_to_zero(self, make_setup, preset):
        params, _ = preset
        data = ProblemData.zero()
        s = make_setup(2, 4, params=params)
        # from the zero control, the very first correction confirms the
        # fixed point: kappa vanishes identically
        res0 = projected_gradient(params, data, s.ops, s.grid,
                                  s.zero_control(), tol=1e-6, max_iter=10)
        assert res0.converged and res0.iterations == 1
        assert res0.objective == 0.0
        # from a nonzero start the iteration contracts to the zero optimum
        # (a larger regularization keeps the fixed-point map contractive
        # away from the box constraints)
        from boussinesq_control.forward import PhysicalParams
        mild = PhysicalParams(nu=params.nu, chi=params.chi, beta=params.beta,
                              g=params.g, gamma=params.gamma, eta=params.eta,
                              alpha=1.0, u_a=params.u_a, u_b=params.u_b)
        nb = len(s.geometry.bvertices)
        u0 = ControlField.raw(s.grid, s.geometry, 0.15 * np.ones((4, nb)))
        res = projected_gradient(mild, data, s.ops, s.grid, u0, tol=1e-6,
                                 max_iter=50)
        assert res.converged
        assert res.objective <= 1e-12
        for n in range(1, 5):
            assert res.control.l2_gamma_sq(n) <= 1e-10

    def test_converged_fixed_point_residual(self, make_setup, preset):
        params, data = preset
        s = make_setup(2, 8, params=params)
        res = projected_gradient(params, data, s.ops, s.grid,
                                 s.zero_control(), tol=1e-6, max_iter=100)
        assert res.converged
        assert res.residuals[-1] <= 1e-6
        # the returned control satisfies the projection fixed point
        state = solve_state(params, data, s.ops, s.grid, res.control)
        adj = solve_adjoint(params, data, s.ops, s.grid, state)
        unext = ControlField.from_adjoint(params, adj, s.geometry)
        assert spacetime_diff_norm(unext, res.control, s.grid) <= 1e-6
        # iterates satisfy the box constraints exactly
        lo, hi = params.u_a, params.u_b
        for n in range(1, 9):
            for e in range(s.geometry.num_edges):
                _, vv = res.control.edge_polyline(n, e)
                assert np.all(vv >= lo - 1e-15) and np.all(vv <= hi + 1e-15)

    def test_nonconvergence_flagged(self, make_setup, preset):
        params, data = preset
        s = make_setup(2, 4, params=params)
        res = projected_gradient(params, data, s.ops, s.grid,
                                 s.zero_control(), tol=1e-12, max_iter=2)
        assert not res.converged
        assert len(res.residuals) == 2
