import csv

import numpy as np

from boussinesq_control.cli import main, vortex_preset


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_vortex_preset_constants():
    params, data = vortex_preset()
    assert params.nu == 0.1
    assert tuple(params.g) == (-10.0, 10.0)
    assert params.beta == params.chi == params.gamma == params.eta == 1.0
    assert params.alpha == 0.1
    assert (params.u_a, params.u_b) == (-0.2, 0.2)
    assert data.horizon == 1.0
    x = np.array([0.25, 0.5])
    y = np.array([0.5, 0.25])
    target = data.target_velocity(0.0, x, y)
    expected_x = 50 * x ** 2 * (x - 1) ** 2 * (2 * y * (y - 1) ** 2
                                               + 2 * y ** 2 * (y - 1))
    assert np.allclose(target[:, 0], expected_x)
    assert np.all(data.body_force(0.3, x, y) == 0.0)
    assert np.all(data.initial_velocity(x, y) == 0.0)


def test_missing_config_rejected(capsys):
    assert main(["solve-state"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[physical]\nnu = -1\nchi = 1\nbeta = 1\n"
                   "g_x = 0\ng_y = 1\ngamma = 1\neta = 1\nalpha = 1\n")
    assert main(["solve-state", "--config", str(cfg)]) == 2


def test_unknown_preset(tmp_path):
    assert main(["solve-state", "--preset", "nope",
                 "--out", str(tmp_path)]) == 2


def test_solve_state_zero_config(tmp_path):
    cfg = tmp_path / "zero.ini"
    cfg.write_text(
        "[physical]\nnu = 1.0\nchi = 1.0\nbeta = 1.0\ng_x = 0\ng_y = 1\n"
        "gamma = 1.0\neta = 1.0\nalpha = 0.1\nu_a = -1\nu_b = 1\n"
        "[grid]\nmesh_level = 1\nsteps = 4\n"
        f"[output]\ndir = {tmp_path / 'out'}\n")
    assert main(["solve-state", "--config", str(cfg)]) == 0
    rows = read_csv(tmp_path / "out" / "state_summary.csv")
    assert rows[0] == ["t", "y_l2", "y_h1", "theta_l2", "theta_h1",
                       "div_residual"]
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    assert body.shape == (4, 6)
    assert np.all(body[:, 1:] == 0.0)
    assert (tmp_path / "out" / "state_velocity_0004.csv").exists()
    assert (tmp_path / "out" / "state_temperature_0000.csv").exists()


def test_solve_adjoint_artifacts(tmp_path):
    out = tmp_path / "adj"
    code = main(["solve-adjoint", "--preset", "vortex", "--out", str(out),
                 "--mesh-level", "1", "--steps", "4"])
    assert code == 0
    rows = read_csv(out / "adjoint_summary.csv")
    assert rows[0][0] == "t"
    assert len(rows) == 5
    vals = np.array([[float(c) for c in r] for r in rows[1:]])
    assert np.all(np.isfinite(vals))
    assert (out / "adjoint_velocity_0001.csv").exists()


def test_gradient_check_artifact_and_reproducibility(tmp_path):
    out1, out2 = tmp_path / "g1", tmp_path / "g2"
    for out in (out1, out2):
        code = main(["gradient-check", "--preset", "vortex",
                     "--out", str(out), "--mesh-level", "2", "--steps", "4"])
        assert code == 0
    b1 = (out1 / "gradient_check.csv").read_bytes()
    b2 = (out2 / "gradient_check.csv").read_bytes()
    assert b1 == b2
    rows = read_csv(out1 / "gradient_check.csv")
    assert rows[0] == ["epsilon", "fd_value", "adjoint_value",
                       "relative_error"]
    rels = [float(r[3]) for r in rows[1:]]
    assert min(rels) <= 1e-6
    for r in rows[1:]:
        assert np.all(np.isfinite([float(c) for c in r]))


def test_optimize_writes_history_and_control(tmp_path):
    out = tmp_path / "opt"
    code = main(["optimize", "--preset", "vortex", "--out", str(out),
                 "--mesh-level", "2", "--steps", "4", "--tol", "1e-5"])
    assert code == 0
    hist = read_csv(out / "optimize_history.csv")
    assert hist[0] == ["iteration", "fixed_point_residual", "objective"]
    assert len(hist) >= 2
    ctrl = read_csv(out / "control_final.csv")
    assert ctrl[0] == ["t", "x", "y", "value"]
    vals = np.array([float(r[3]) for r in ctrl[1:]])
    assert np.all(vals >= -0.2 - 1e-12) and np.all(vals <= 0.2 + 1e-12)


def test_optimize_nonconvergence_exit_code(tmp_path):
    out = tmp_path / "optnc"
    code = main(["optimize", "--preset", "vortex", "--out", str(out),
                 "--mesh-level", "1", "--steps", "2", "--tol", "1e-14",
                 "--max-iter", "2"])
    assert code == 4
    assert (out / "optimize_history.csv").exists()


def test_convergence_study_smoke(tmp_path):
    cfg = tmp_path / "study.ini"
    cfg.write_text(
        "[data]\npreset = vortex\n"
        "[study]\nkind = spatial\ncoarse_levels = 1 2\nref_level = 3\n"
        "steps = 4\n"
        f"[output]\ndir = {tmp_path / 'study'}\n")
    code = main(["convergence-study", "--config", str(cfg)])
    assert code == 0
    rows = read_csv(tmp_path / "study" / "eoc_spatial.csv")
    assert rows[0][0] == "h"
    assert "err_y_linf_l2" in rows[0]
    assert "rate_u_l2_l2" in rows[0]
    assert len(rows) == 3
    assert rows[1][2] == ""  # no rate on the first row
    assert float(rows[2][2]) != 0.0


def test_vtk_dump(tmp_path):
    cfg = tmp_path / "vtk.ini"
    cfg.write_text(
        "[data]\npreset = vortex\n[grid]\nmesh_level = 1\nsteps = 2\n"
        f"[output]\ndir = {tmp_path / 'vtk'}\nvtk = yes\n")
    assert main(["solve-state", "--config", str(cfg)]) == 0
    text = (tmp_path / "vtk" / "state_0001.vtk").read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert "VECTORS velocity double" in text
    assert "SCALARS temperature double" in text
