"""Configuration-driven command line driver.

Subcommands: ``solve-state``, ``solve-adjoint``, ``gradient-check``,
``optimize`` and ``convergence-study``.  Configuration comes from an INI
file (flat sections, see the repository README) plus a built-in preset
``vortex`` that reproduces the buoyant vortex-pair tracking case used by
the convergence studies; command-line flags override both.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 optimizer did not converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis
from .adjoint import solve_adjoint
from .assembly import assemble_operator_set, build_space_set
from .control_opt import (BoundaryGeometry, ControlCombination, ControlField,
                          gradient_trace, objective, projected_gradient,
                          spacetime_inner)
from .forward import (PhysicalParams, ProblemData, SpaceTimeFn, TimeGrid,
                      solve_state, zero_spatial_scalar, zero_spatial_vector)
from .linsolve import LinearSolverError
from .mesh import build_unit_square_mesh

__all__ = ["ExperimentConfig", "run_subcommand", "main", "vortex_preset"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_NO_CONVERGENCE = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# named analytic data


def _vortex_target(t, x, y):
    u = 50.0 * x ** 2 * (x - 1.0) ** 2 * (2.0 * y * (y - 1.0) ** 2
                                          + 2.0 * y ** 2 * (y - 1.0))
    v = -50.0 * y ** 2 * (y - 1.0) ** 2 * (2.0 * x * (x - 1.0) ** 2
                                           + 2.0 * x ** 2 * (x - 1.0))
    return np.column_stack([u, v])


def _named_scalar(name: str) -> SpaceTimeFn:
    if name == "zero":
        return SpaceTimeFn.zero_scalar()
    if name == "one":
        return SpaceTimeFn(lambda t, x, y: np.ones_like(x), True)
    if name == "sin_pi_xy":
        return SpaceTimeFn(
            lambda t, x, y: np.sin(np.pi * x) * np.sin(np.pi * y), True)
    if name.startswith("constant:"):
        c = float(name.split(":", 1)[1])
        return SpaceTimeFn(lambda t, x, y: np.full_like(x, c), True)
    raise ConfigError(f"unknown scalar function {name!r}")


def _named_vector(name: str) -> SpaceTimeFn:
    if name == "zero":
        return SpaceTimeFn.zero_vector()
    if name == "vortex_pair":
        return SpaceTimeFn(_vortex_target, True)
    raise ConfigError(f"unknown vector function {name!r}")


def vortex_preset() -> tuple[PhysicalParams, ProblemData]:
    """Buoyant vortex-pair tracking case driving the convergence studies."""
    params = PhysicalParams(nu=0.1, chi=1.0, beta=1.0, g=(-10.0, 10.0),
                            gamma=1.0, eta=1.0, alpha=0.1,
                            u_a=-0.2, u_b=0.2)
    data = ProblemData(
        body_force=SpaceTimeFn.zero_vector(),
        heat_source=SpaceTimeFn.zero_scalar(),
        initial_velocity=zero_spatial_vector,
        initial_temperature=zero_spatial_scalar,
        target_velocity=SpaceTimeFn(_vortex_target, True),
        target_temperature=SpaceTimeFn.zero_scalar(),
        horizon=1.0)
    return params, data


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    params: PhysicalParams
    data: ProblemData
    mesh_level: int = 3
    steps: int = 16
    grading: float = 1.0
    solver_tol: float = 1e-10
    opt_tol: float = 1e-6
    max_iter: int = 200
    out_dir: Path = Path("out")
    threads: int = 1
    write_vtk: bool = False
    control_value: float = 0.0
    seed: int = 1234
    study_kind: str = "spatial"
    coarse_levels: tuple[int, ...] = (2, 3, 4, 5)
    ref_level: int = 6
    study_steps: int = 128
    study_mesh_level: int = 5
    coarse_steps: tuple[int, ...] = (4, 8, 16, 32)
    ref_steps: int = 256

    def grid(self) -> TimeGrid:
        if self.grading == 1.0:
            return TimeGrid.uniform(self.data.horizon, self.steps)
        return TimeGrid.graded(self.data.horizon, self.steps, self.grading)


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(",", " ").split())


def load_config(path: Optional[str], preset: Optional[str],
                overrides: argparse.Namespace) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
    preset_name = preset or cp.get("data", "preset", fallback=None)

    if preset_name is not None:
        if preset_name != "vortex":
            raise ConfigError(f"unknown preset {preset_name!r}")
        params, data = vortex_preset()
    else:
        try:
            phys = cp["physical"]
            params = PhysicalParams(
                nu=phys.getfloat("nu"),
                chi=phys.getfloat("chi"),
                beta=phys.getfloat("beta"),
                g=(phys.getfloat("g_x"), phys.getfloat("g_y")),
                gamma=phys.getfloat("gamma"),
                eta=phys.getfloat("eta"),
                alpha=phys.getfloat("alpha"),
                u_a=phys.getfloat("u_a", fallback=-np.inf),
                u_b=phys.getfloat("u_b", fallback=np.inf))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid [physical] section: {exc}") from exc
        dsec = cp["data"] if cp.has_section("data") else {}
        try:
            data = ProblemData(
                body_force=_named_vector(dsec.get("body_force", "zero")),
                heat_source=_named_scalar(dsec.get("heat_source", "zero")),
                initial_velocity=_spatial_vec(dsec.get("initial_velocity", "zero")),
                initial_temperature=_spatial_sc(dsec.get("initial_temperature", "zero")),
                target_velocity=_named_vector(dsec.get("target_velocity", "zero")),
                target_temperature=_named_scalar(dsec.get("target_temperature", "zero")),
                horizon=float(dsec.get("horizon", "1.0")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid [data] section: {exc}") from exc

    cfg = ExperimentConfig(params=params, data=data)
    if cp.has_section("grid"):
        cfg.mesh_level = cp.getint("grid", "mesh_level", fallback=cfg.mesh_level)
        cfg.steps = cp.getint("grid", "steps", fallback=cfg.steps)
        cfg.grading = cp.getfloat("grid", "grading", fallback=cfg.grading)
    if cp.has_section("solver"):
        cfg.solver_tol = cp.getfloat("solver", "tol", fallback=cfg.solver_tol)
    if cp.has_section("optimizer"):
        cfg.opt_tol = cp.getfloat("optimizer", "tol", fallback=cfg.opt_tol)
        cfg.max_iter = cp.getint("optimizer", "max_iter", fallback=cfg.max_iter)
    if cp.has_section("control"):
        cfg.control_value = cp.getfloat("control", "value",
                                        fallback=cfg.control_value)
    if cp.has_section("output"):
        cfg.out_dir = Path(cp.get("output", "dir", fallback=str(cfg.out_dir)))
        cfg.write_vtk = cp.getboolean("output", "vtk", fallback=False)
    if cp.has_section("study"):
        st = cp["study"]
        cfg.study_kind = st.get("kind", cfg.study_kind)
        if "coarse_levels" in st:
            cfg.coarse_levels = _parse_int_list(st["coarse_levels"])
        cfg.ref_level = st.getint("ref_level", fallback=cfg.ref_level)
        cfg.study_steps = st.getint("steps", fallback=cfg.study_steps)
        cfg.study_mesh_level = st.getint("mesh_level",
                                         fallback=cfg.study_mesh_level)
        if "coarse_steps" in st:
            cfg.coarse_steps = _parse_int_list(st["coarse_steps"])
        cfg.ref_steps = st.getint("ref_steps", fallback=cfg.ref_steps)

    for name in ("mesh_level", "steps", "tol", "max_iter", "out", "threads"):
        val = getattr(overrides, name.replace("-", "_"), None)
        if val is not None:
            if name == "out":
                cfg.out_dir = Path(val)
            elif name == "tol":
                cfg.opt_tol = val
            else:
                setattr(cfg, name, val)
    if cfg.mesh_level < 0 or cfg.steps < 1:
        raise ConfigError("mesh_level must be >= 0 and steps >= 1")
    if cfg.study_kind not in ("spatial", "temporal"):
        raise ConfigError(f"unknown study kind {cfg.study_kind!r}")
    return cfg


def _spatial_vec(name: str) -> Callable:
    fn = _named_vector(name)
    return lambda x, y: fn(0.0, x, y)


def _spatial_sc(name: str) -> Callable:
    fn = _named_scalar(name)
    return lambda x, y: fn(0.0, x, y)


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(x: float) -> str:
    return f"{x:.16e}"


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else _fmt(float(c))
                        for c in row])


def _dump_scalar_field(path: Path, mesh, values: np.ndarray) -> None:
    rows = [(x, y, v) for (x, y), v in zip(mesh.vertices, values)]
    _write_csv(path, ["x", "y", "value"], rows)


def _dump_velocity_field(path: Path, mesh, coeffs: np.ndarray) -> None:
    nv = mesh.num_vertices
    nc = nv + mesh.num_triangles
    rows = [(x, y, coeffs[i], coeffs[nc + i])
            for i, (x, y) in enumerate(mesh.vertices)]
    _write_csv(path, ["x", "y", "u_x", "u_y"], rows)


def _write_vtk(path: Path, mesh, point_data: dict[str, np.ndarray]) -> None:
    """Legacy ASCII VTK unstructured grid with per-vertex data."""
    path.parent.mkdir(parents=True, exist_ok=True)
    nv, nt = mesh.num_vertices, mesh.num_triangles
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfield dump\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.16e} {y:.16e} 0.0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"POINT_DATA {nv}\n")
        for name, arr in point_data.items():
            if arr.ndim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in arr:
                    fh.write(f"{v:.16e}\n")
            else:
                fh.write(f"VECTORS {name} double\n")
                for vx, vy in arr:
                    fh.write(f"{vx:.16e} {vy:.16e} 0.0\n")


# ---------------------------------------------------------------------------
# subcommands


def _setup(cfg: ExperimentConfig):
    mesh = build_unit_square_mesh(cfg.mesh_level)
    spaces = build_space_set(mesh)
    ops = assemble_operator_set(spaces, g=cfg.params.g)
    grid = cfg.grid()
    geo = BoundaryGeometry(spaces.temperature)
    if cfg.control_value == 0.0:
        control = ControlField.zero(grid, geo)
    else:
        control = ControlField.raw(
            grid, geo, np.full((grid.num_steps, len(geo.bvertices)),
                               cfg.control_value))
    return mesh, ops, grid, geo, control


def _state_summary_rows(ops, grid, traj):
    rows = []
    for n in range(1, grid.num_steps + 1):
        y = traj.velocity[n]
        th = traj.temperature[n]
        rows.append((grid.nodes[n],
                     np.sqrt(y @ (ops.M_v @ y)),
                     np.sqrt(y @ ((ops.M_v + ops.K_v) @ y)),
                     np.sqrt(th @ (ops.M_theta @ th)),
                     np.sqrt(th @ ((ops.M_theta + ops.K_theta) @ th)),
                     np.abs(ops.B @ y).max()))
    return rows


def cmd_solve_state(cfg: ExperimentConfig) -> int:
    mesh, ops, grid, geo, control = _setup(cfg)
    traj = solve_state(cfg.params, cfg.data, ops, grid, control,
                       tol=cfg.solver_tol)
    out = cfg.out_dir
    _write_csv(out / "state_summary.csv",
               ["t", "y_l2", "y_h1", "theta_l2", "theta_h1", "div_residual"],
               _state_summary_rows(ops, grid, traj))
    for n in range(grid.num_steps + 1):
        _dump_velocity_field(out / f"state_velocity_{n:04d}.csv", mesh,
                             traj.velocity[n])
        _dump_scalar_field(out / f"state_temperature_{n:04d}.csv", mesh,
                           traj.temperature[n])
        if cfg.write_vtk:
            nv = mesh.num_vertices
            nc = nv + mesh.num_triangles
            vel = np.column_stack([traj.velocity[n][:nv],
                                   traj.velocity[n][nc:nc + nv]])
            _write_vtk(out / f"state_{n:04d}.vtk", mesh,
                       {"velocity": vel, "temperature": traj.temperature[n]})
    print(f"wrote state trajectory ({grid.num_steps} steps) to {out}")
    return EXIT_OK


def cmd_solve_adjoint(cfg: ExperimentConfig) -> int:
    mesh, ops, grid, geo, control = _setup(cfg)
    traj = solve_state(cfg.params, cfg.data, ops, grid, control,
                       tol=cfg.solver_tol)
    adj = solve_adjoint(cfg.params, cfg.data, ops, grid, traj,
                        tol=cfg.solver_tol)
    out = cfg.out_dir
    rows = []
    for n in range(1, grid.num_steps + 1):
        mu = adj.mu[n]
        ka = adj.kappa[n]
        rows.append((grid.nodes[n - 1],
                     np.sqrt(mu @ (ops.M_v @ mu)),
                     np.sqrt(mu @ ((ops.M_v + ops.K_v) @ mu)),
                     np.sqrt(ka @ (ops.M_theta @ ka)),
                     np.sqrt(ka @ ((ops.M_theta + ops.K_theta) @ ka)),
                     np.abs(ops.B @ mu).max()))
    _write_csv(out / "adjoint_summary.csv",
               ["t", "mu_l2", "mu_h1", "kappa_l2", "kappa_h1",
                "div_residual"], rows)
    for n in range(1, grid.num_steps + 1):
        _dump_velocity_field(out / f"adjoint_velocity_{n:04d}.csv", mesh,
                             adj.mu[n])
        _dump_scalar_field(out / f"adjoint_temperature_{n:04d}.csv", mesh,
                           adj.kappa[n])
    print(f"wrote adjoint trajectory ({grid.num_steps} steps) to {out}")
    return EXIT_OK


def cmd_gradient_check(cfg: ExperimentConfig) -> int:
    mesh, ops, grid, geo, _ = _setup(cfg)
    rng = np.random.default_rng(cfg.seed)
    nb = len(geo.bvertices)
    u = ControlField.raw(grid, geo,
                         0.05 * rng.standard_normal((grid.num_steps, nb)))
    v = ControlField.raw(grid, geo,
                         rng.standard_normal((grid.num_steps, nb)))

    def J(ctrl) -> float:
        st = solve_state(cfg.params, cfg.data, ops, grid, ctrl,
                         tol=cfg.solver_tol)
        return objective(cfg.params, cfg.data, grid, st, ctrl)

    state = solve_state(cfg.params, cfg.data, ops, grid, u,
                        tol=cfg.solver_tol)
    adj = solve_adjoint(cfg.params, cfg.data, ops, grid, state,
                        tol=cfg.solver_tol)
    grad = gradient_trace(cfg.params, adj, u)
    dj_adj = spacetime_inner(grad, v, grid)
    rows = []
    worst_at_1e5 = None
    for eps in (1e-3, 1e-4, 1e-5, 1e-6):
        jp = J(ControlCombination([(1.0, u), (eps, v)]))
        jm = J(ControlCombination([(1.0, u), (-eps, v)]))
        fd = (jp - jm) / (2 * eps)
        rel = abs(fd - dj_adj) / max(abs(fd), 1e-300)
        rows.append((eps, fd, dj_adj, rel))
        if eps == 1e-5:
            worst_at_1e5 = rel
    _write_csv(cfg.out_dir / "gradient_check.csv",
               ["epsilon", "fd_value", "adjoint_value", "relative_error"],
               rows)
    print(f"gradient check: relative error {worst_at_1e5:.3e} at eps=1e-5")
    return EXIT_OK


def cmd_optimize(cfg: ExperimentConfig) -> int:
    mesh, ops, grid, geo, control = _setup(cfg)
    history = []

    def cb(k, res, obj):
        history.append((k, res, obj))

    result = projected_gradient(cfg.params, cfg.data, ops, grid, control,
                                tol=cfg.opt_tol, max_iter=cfg.max_iter,
                                solver_tol=cfg.solver_tol, callback=cb)
    out = cfg.out_dir
    _write_csv(out / "optimize_history.csv",
               ["iteration", "fixed_point_residual", "objective"], history)
    rows = []
    u = result.control
    for n in range(1, grid.num_steps + 1):
        nod = u.nodal(n)
        if u.mode == "clamped":
            nod = np.clip(nod, *u.bounds)
        for k, (x, y) in enumerate(geo.coords):
            rows.append((grid.nodes[n], x, y, nod[k]))
    _write_csv(out / "control_final.csv", ["t", "x", "y", "value"], rows)
    print(f"optimize: {result.iterations} iterations, "
          f"J = {result.objective:.8e}, converged = {result.converged}")
    if not result.converged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_convergence_study(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir

    def log(msg: str):
        print(msg, flush=True)

    if cfg.study_kind == "spatial":
        table, reports = analysis.run_spatial_study(
            cfg.params, cfg.data, coarse_levels=cfg.coarse_levels,
            ref_level=cfg.ref_level, num_steps=cfg.study_steps,
            tol=cfg.opt_tol, max_iter=cfg.max_iter,
            solver_tol=cfg.solver_tol, log=log, threads=cfg.threads)
        name = "eoc_spatial.csv"
    else:
        table, reports = analysis.run_temporal_study(
            cfg.params, cfg.data, mesh_level=cfg.study_mesh_level,
            coarse_steps=cfg.coarse_steps, ref_steps=cfg.ref_steps,
            tol=cfg.opt_tol, max_iter=cfg.max_iter,
            solver_tol=cfg.solver_tol, log=log, threads=cfg.threads)
        name = "eoc_temporal.csv"
    header = [table.parameter_name]
    for n in table.errors:
        header += [f"err_{n}", f"rate_{n}"]
    rows = []
    for i, p in enumerate(table.parameters):
        row = [p]
        for n in table.errors:
            row.append(table.errors[n][i])
            row.append("" if i == 0 else _fmt(table.rates[n][i - 1]))
        rows.append(row)
    _write_csv(out / name, header, rows)
    print(table.format_text())
    print(f"wrote {out / name}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def run_subcommand(name: str, cfg: ExperimentConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dispatch = {
        "solve-state": cmd_solve_state,
        "solve-adjoint": cmd_solve_adjoint,
        "gradient-check": cmd_gradient_check,
        "optimize": cmd_optimize,
        "convergence-study": cmd_convergence_study,
    }
    try:
        return dispatch[name](cfg)
    except (LinearSolverError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="boussinesq-control",
        description="Robin boundary control of the Boussinesq equations")
    ap.add_argument("command", choices=["solve-state", "solve-adjoint",
                                        "gradient-check", "optimize",
                                        "convergence-study"])
    ap.add_argument("--config", default=None, help="INI configuration file")
    ap.add_argument("--preset", default=None,
                    help="built-in case name (vortex)")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--mesh-level", type=int, default=None, dest="mesh_level")
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--tol", type=float, default=None,
                    help="optimizer tolerance")
    ap.add_argument("--max-iter", type=int, default=None, dest="max_iter")
    ap.add_argument("--threads", type=int, default=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.config is None and args.preset is None:
        print("configuration error: provide --config or --preset",
              file=sys.stderr)
        return EXIT_CONFIG
    return run_subcommand(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
