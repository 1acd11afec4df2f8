import csv
import json

import jsonschema
import numpy as np
import pytest

from weakkam.cli import EXIT_CONFIG, EXIT_NOCONV, EXIT_OK, EXIT_VERIFY, load_schema, main
from weakkam.mather import alpha_oracle_1d

PENDULUM = "cos(2*pi*x)"
CONSISTENT = {"tau": 0.02, "quadrature": "midpoint", "refine": True}


def write_config(path, potential=PENDULUM, n=256, solver=None, **extra):
    cfg = {"hamiltonian": {"kind": "mechanical", "potential": potential}, "grid": {"dim": 1, "n": n}}
    if solver is not None:
        cfg["solver"] = solver
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def validate(path, schema):
    jsonschema.validate(json.loads(path.read_text()), load_schema(schema))


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    """Pendulum artifacts from the consistent (midpoint, refined) scheme."""
    root = tmp_path_factory.mktemp("solved")
    cfg = write_config(root / "cfg.json", solver=CONSISTENT)
    assert main(["solve", "--config", cfg, "--out", str(root / "out")]) == EXIT_OK
    return root, cfg


# -- solve ----------------------------------------------------------------------------


def test_solve_pendulum(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", solver={"tau": 0.02})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith("c = ") and abs(float(line[4:]) - 1.0) <= 1e-2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["converged"] and abs(report["c"] - 1.0) <= 1e-2
    validate(tmp_path / "o" / "report.json", "solve_report")
    assert (tmp_path / "o" / "solution.csv").exists() and (tmp_path / "o" / "solution.json").exists()


def test_solve_free_particle(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=64)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "c = 0.0"


def test_solve_missing_grid_n(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"hamiltonian": {"kind": "mechanical", "potential": "0"}, "grid": {"dim": 1}}))
    assert main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "$.grid" in err and "'n'" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda c: c.update(extra=1), "$"),
        (lambda c: c["grid"].update(n=4), "$.grid.n"),
        (lambda c: c.update(solver={"quadrature": "simpson"}), "$.solver.quadrature"),
        (lambda c: c["hamiltonian"].update(potential="cos(2*pi*z)"), "$.hamiltonian.potential"),
    ],
)
def test_config_errors(tmp_path, capsys, mutate, where):
    cfg = {"hamiltonian": {"kind": "mechanical", "potential": "0"}, "grid": {"dim": 1, "n": 16}}
    mutate(cfg)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == EXIT_CONFIG


def test_solve_not_converged(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", n=64, solver={"max_iter": 3})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NOCONV
    assert not json.loads((tmp_path / "o" / "report.json").read_text())["converged"]


def test_output_directory_precedence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16, outputs={"directory": "from_config", "formats": ["json"]})
    assert main(["solve", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "from_config" / "solution.json").exists()
    assert not (tmp_path / "from_config" / "solution.csv").exists()
    monkeypatch.setenv("WEAKKAM_OUTPUT_DIR", str(tmp_path / "from_env"))
    assert main(["solve", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "from_env" / "report.json").exists()
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "from_flag")]) == EXIT_OK
    assert (tmp_path / "from_flag" / "report.json").exists()


def test_determinism(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", n=128)
    for name in ("a", "b"):
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("solution.csv", "solution.json", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- alpha ----------------------------------------------------------------------------


def test_alpha_pendulum(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", solver={"tau": 0.02})
    assert main(["alpha", "--config", cfg, "--out", str(tmp_path / "o"), "--omega-range", "-2:2:0.1"]) == EXIT_OK
    header, rows = read_csv(tmp_path / "o" / "alpha.csv")
    assert header == ["omega", "alpha", "residual"] and len(rows) == 41
    flat = np.abs(rows[:, 0]) <= 1.2 + 1e-9
    assert np.all(np.abs(rows[flat, 1] - 1.0) <= 1e-2)
    assert abs(rows[-1, 1] - alpha_oracle_1d(PENDULUM, 2.0)) <= 1e-2
    validate(tmp_path / "o" / "alpha_report.json", "alpha_report")
    assert json.loads((tmp_path / "o" / "alpha_report.json").read_text())["convexity"]["passed"]


def test_alpha_free_particle(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=128)
    assert main(["alpha", "--config", cfg, "--out", str(tmp_path / "o"), "--omega-range", "-1.5:1.5:0.5"]) == EXIT_OK
    _, rows = read_csv(tmp_path / "o" / "alpha.csv")
    assert np.allclose(rows[:, 1], 0.5 * rows[:, 0] ** 2, atol=1e-2)


def test_alpha_two_dimensional(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"hamiltonian": {"kind": "mechanical", "potential": "0"}, "grid": {"dim": 2, "n": 16}}))
    assert main(["alpha", "--config", str(path), "--out", str(tmp_path / "o"), "--omega-range", "0:1:1"]) == EXIT_OK
    header, rows = read_csv(tmp_path / "o" / "alpha.csv")
    assert header == ["omega1", "omega2", "alpha", "residual"] and len(rows) == 4
    assert np.allclose(rows[:, 2], 0.5 * (rows[:, 0] ** 2 + rows[:, 1] ** 2), atol=1e-2)
    # a 2x2 table has no collinear triple, so convexity is reported as not applicable
    conv = json.loads((tmp_path / "o" / "alpha_report.json").read_text())["convexity"]
    assert conv["worst_triple"] is None


@pytest.mark.parametrize("spec", ["1:0:0.1", "0:1:0", "a:b:c"])
def test_alpha_bad_range(tmp_path, spec):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16)
    assert main(["alpha", "--config", cfg, "--out", str(tmp_path / "o"), "--omega-range", spec]) == EXIT_CONFIG


def test_alpha_needs_range(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16)
    assert main(["alpha", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# -- verify and smooth ----------------------------------------------------------------


def test_verify_pass(solved, tmp_path, capsys):
    root, cfg = solved
    code = main(["verify", "--config", cfg, "--artifacts", str(root / "out"), "--out", str(tmp_path)])
    assert code == EXIT_OK, capsys.readouterr().out
    report = tmp_path / "verify_report.json"
    validate(report, "check_report")
    doc = json.loads(report.read_text())
    assert doc["passed"] and [c["name"] for c in doc["checks"]][:2] == ["subsolution", "domination"]


def test_verify_lowered_c_fails(solved, tmp_path):
    root, cfg = solved
    art = tmp_path / "art"
    art.mkdir()
    report = json.loads((root / "out" / "report.json").read_text())
    report["c"] -= 0.2
    (art / "report.json").write_text(json.dumps(report))
    (art / "solution.csv").write_bytes((root / "out" / "solution.csv").read_bytes())
    assert main(["verify", "--config", cfg, "--artifacts", str(art), "--out", str(tmp_path / "o")]) == EXIT_VERIFY
    checks = {c["name"]: c for c in json.loads((tmp_path / "o" / "verify_report.json").read_text())["checks"]}
    assert not checks["domination"]["passed"] and checks["domination"]["detail"]["positive"] >= 1


def test_verify_with_smoothing(solved, tmp_path):
    root, cfg = solved
    args = ["verify", "--config", cfg, "--artifacts", str(root / "out"), "--out", str(tmp_path), "--smooth", "0.05"]
    assert main(args) == EXIT_OK
    doc = json.loads((tmp_path / "verify_report.json").read_text())
    names = [c["name"] for c in doc["checks"]]
    assert {"sup_distance", "smoothed_subsolution", "clarke_hull"} <= set(names)
    assert (tmp_path / "smoothed.csv").exists()


def test_smooth_command(solved, tmp_path):
    root, cfg = solved
    assert main(["smooth", "--config", cfg, "--artifacts", str(root / "out"), "--out", str(tmp_path), "--smooth", "0.05"]) == EXIT_OK
    validate(tmp_path / "smooth_report.json", "check_report")
    assert main(["smooth", "--config", cfg, "--artifacts", str(root / "out"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_verify_missing_artifacts(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16)
    assert main(["verify", "--config", cfg, "--artifacts", str(tmp_path / "none")]) == EXIT_CONFIG


def test_verify_is_deterministic(solved, tmp_path):
    root, cfg = solved
    for name in ("a", "b"):
        main(["verify", "--config", cfg, "--artifacts", str(root / "out"), "--out", str(tmp_path / name), "--seed", "4"])
    assert (tmp_path / "a" / "verify_report.json").read_bytes() == (tmp_path / "b" / "verify_report.json").read_bytes()


# -- flow -----------------------------------------------------------------------------


def test_flow_free(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16)
    args = ["flow", "--config", cfg, "--out", str(tmp_path / "o"), "--x", "0", "--p", "1", "--t-end", "1", "--dt", "0.01"]
    assert main(args) == EXIT_OK
    header, rows = read_csv(tmp_path / "o" / "trajectory.csv")
    assert header == ["t", "x1", "p1", "energy"]
    assert np.all(rows[:, 2] == 1.0) and np.all(rows[:, 3] == 0.5)
    validate(tmp_path / "o" / "flow_report.json", "flow_report")


def test_flow_pendulum(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    args = ["flow", "--config", cfg, "--out", str(tmp_path / "o"), "--x", "0", "--p", "2", "--t-end", "10", "--dt", "1e-3"]
    assert main(args) == EXIT_OK
    report = json.loads((tmp_path / "o" / "flow_report.json").read_text())
    assert report["energy_initial"] == 3.0 and report["energy_drift"] < 1e-6
    assert report["momentum_bound"]["ok"]


def test_flow_rest_point(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    args = ["flow", "--config", cfg, "--out", str(tmp_path / "o"), "--x", "0.5", "--p", "0", "--t-end", "1", "--dt", "0.01"]
    assert main(args) == EXIT_OK
    _, rows = read_csv(tmp_path / "o" / "trajectory.csv")
    assert np.allclose(rows[:, 1], 0.5, atol=1e-14) and np.allclose(rows[:, 2], 0.0, atol=1e-13)


@pytest.mark.parametrize("extra", [["--p", "1"], ["--x", "0,1", "--p", "1"], ["--x", "0", "--p", "1", "--dt", "0"]])
def test_flow_bad_arguments(tmp_path, extra):
    cfg = write_config(tmp_path / "cfg.json", potential="0", n=16)
    assert main(["flow", "--config", cfg, "--out", str(tmp_path / "o"), *extra]) == EXIT_CONFIG
