"""
Command-line entry point.

Every command reads one JSON configuration (validated against the shipped
schema before any computation) and writes its artifacts into an output
directory chosen, in order of precedence, by ``--out``, the
``WEAKKAM_OUTPUT_DIR`` environment variable, ``outputs.directory`` in the
config, and finally ``./weakkam-out``.

Exit codes: 0 ok, 1 verification failure, 2 configuration error,
3 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .expr import ExpressionError
from .flows import PhasePoint, integrate, momentum_bound_check
from .grid import GridFunction, PeriodicGrid, mollifier_kernel
from .hamiltonian import (
    Hamiltonian,
    HamiltonianError,
    Lagrangian,
    estimate_constants,
    load_tabulated,
    mechanical,
    shifted,
)
from .lax_oleinik import LaxOleinikConfig, WeakKamSolution, resolve_config, solve_weak_kam
from .mather import alpha_sweep, convexity_check, omega_range
from .verify import (
    CheckResult,
    VerificationError,
    VerificationReport,
    check_calibration,
    check_domination,
    check_evolution,
    check_fixed_point,
    check_subsolution,
    clarke_hull_check,
    smooth_subsolution,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NOCONV = 0, 1, 2, 3
OUTPUT_ENV = "WEAKKAM_OUTPUT_DIR"
DEFAULT_OUTPUT = "weakkam-out"


class ConfigError(Exception):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("weakkam").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _pointer(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def validate_document(doc, schema_name: str) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{schema_name} violation at {_pointer(e)}: {e.message}")


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_document(doc, "config")
    doc["_base"] = str(Path(path).resolve().parent)
    return doc


def build_hamiltonian(cfg: dict) -> Hamiltonian:
    spec = cfg["hamiltonian"]
    dim = cfg["grid"]["dim"]
    try:
        if spec["kind"] == "mechanical":
            H = mechanical(spec["potential"], dim)
        else:
            path = Path(spec["table"])
            if not path.is_absolute():
                path = Path(cfg["_base"]) / path
            H = load_tabulated(path)
            if H.dim != dim:
                raise ConfigError(f"$.hamiltonian.table has dimension {H.dim}, grid has {dim}")
    except ExpressionError as exc:
        raise ConfigError(f"$.hamiltonian.potential: {exc}") from exc
    except (HamiltonianError, OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"$.hamiltonian: {exc}") from exc
    omega = spec.get("omega")
    if omega is not None:
        if len(omega) != dim:
            raise ConfigError(f"$.hamiltonian.omega must have {dim} entries")
        if any(omega):
            H = shifted(H, omega)
    return H


def build_grid(cfg: dict) -> PeriodicGrid:
    return PeriodicGrid(cfg["grid"]["dim"], cfg["grid"]["n"])


def build_solver(cfg: dict) -> LaxOleinikConfig:
    raw = dict(cfg.get("solver", {}))
    if isinstance(raw.get("anchor"), list):
        raw["anchor"] = tuple(raw["anchor"])
    known = {f.name for f in fields(LaxOleinikConfig)}
    return LaxOleinikConfig(**{k: v for k, v in raw.items() if k in known})


def output_dir(args, cfg: dict) -> Path:
    chosen = args.out or os.environ.get(OUTPUT_ENV) or cfg.get("outputs", {}).get("directory")
    if chosen and not Path(chosen).is_absolute() and not args.out and not os.environ.get(OUTPUT_ENV):
        chosen = str(Path(cfg["_base"]) / chosen)
    out = Path(chosen or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def formats(cfg: dict) -> set:
    return set(cfg.get("outputs", {}).get("formats", ["csv", "json"]))


def write_report(out: Path, name: str, report: dict, schema: str) -> Path:
    validate_document(report, schema)
    path = out / name
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _solve(cfg: dict) -> WeakKamSolution:
    H = build_hamiltonian(cfg)
    grid = build_grid(cfg)
    try:
        solver = resolve_config(build_solver(cfg), H, grid)
    except ValueError as exc:
        raise ConfigError(f"$.solver: {exc}") from exc
    return solve_weak_kam(H, grid, solver)


def cmd_solve(args, cfg: dict) -> int:
    sol = _solve(cfg)
    out = output_dir(args, cfg)
    fmts = formats(cfg)
    if "csv" in fmts:
        sol.u.to_csv(out / "solution.csv")
    if "json" in fmts:
        (out / "solution.json").write_text(sol.u.to_json() + "\n")
    report = {"command": "solve", **sol.report()}
    if sol.rho is not None:
        report["omega"] = list(sol.rho)
    omega = cfg["hamiltonian"].get("omega")
    if omega is not None:
        report["omega"] = [float(w) for w in omega]
    write_report(out, "report.json", report, "solve_report")
    print(f"c = {sol.c!r}")
    print(f"residual = {sol.residual:.3e}")
    if not sol.converged:
        print(f"not converged after {sol.iterations} iterations", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def parse_range(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(t) for t in text.split(":"))
        values = omega_range(start, stop, step)
    except ValueError as exc:
        raise ConfigError(f"--omega-range expects A:B:STEP with STEP > 0 ({exc})") from exc
    if len(values) == 0:
        raise ConfigError(f"--omega-range {text} is empty")
    return values


def cmd_alpha(args, cfg: dict) -> int:
    if not args.omega_range:
        raise ConfigError("alpha needs --omega-range A:B:STEP")
    values = parse_range(args.omega_range)
    H = build_hamiltonian(cfg)
    grid = build_grid(cfg)
    if grid.dim == 1:
        omegas = values[:, None]
    else:
        omegas = np.stack(np.meshgrid(values, values, indexing="ij"), axis=-1).reshape(-1, 2)
    table = alpha_sweep(H, omegas, grid, build_solver(cfg))
    out = output_dir(args, cfg)
    if "csv" in formats(cfg):
        table.to_csv(out / "alpha.csv")
    tol = 3.0 * float(np.max(table.error_bound()))
    conv = {"passed": True, "tol": tol, "worst_defect": None, "worst_triple": None}
    try:
        res = convexity_check(table, tol)
    except ValueError:  # fewer than three samples, or no collinear triple
        res = None
    if res is not None:
        conv = {"passed": res.passed, "tol": tol, "worst_defect": res.worst_defect,
                "worst_triple": _jsonable(res.worst_triple)}
    report = {"command": "alpha", "entries": len(table),
              "all_converged": bool(table.converged.all()), "convexity": conv}
    write_report(out, "alpha_report.json", report, "alpha_report")
    for om, a in zip(table.omegas, table.alphas):
        print(" ".join(f"{w:g}" for w in om), repr(float(a)))
    if not table.converged.all():
        return EXIT_NOCONV
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, (tuple, list)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_artifacts(args, cfg: dict) -> tuple[GridFunction, float]:
    src = Path(args.artifacts) if args.artifacts else output_dir(args, cfg)
    report_path = src / "report.json"
    try:
        report = json.loads(report_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read solution report {report_path}: {exc}") from exc
    validate_document(report, "solve_report")
    if (src / "solution.csv").exists():
        u = GridFunction.from_csv(src / "solution.csv")
    elif (src / "solution.json").exists():
        u = GridFunction.from_json((src / "solution.json").read_text())
    else:
        raise ConfigError(f"no solution.csv or solution.json in {src}")
    if u.grid != build_grid(cfg):
        raise ConfigError("stored solution grid differs from $.grid")
    return u, float(report["c"])


def _rebuild_solution(H, u: GridFunction, c: float, cfg: dict) -> WeakKamSolution:
    """Wrap stored values so calibration can backtrack through fresh sweeps."""
    solver = resolve_config(build_solver(cfg), H, u.grid)
    return WeakKamSolution(u, c, float("nan"), 0, True, solver.tau, solver, hamiltonian=H)


def _smoothing_checks(H, u: GridFunction, c: float, eps: float, report: VerificationReport, out: Path, fmts):
    try:
        g, rep = smooth_subsolution(H, u, c, eps)
    except VerificationError as exc:
        report.add(CheckResult("smoothing_precondition", float("inf"), eps, False, {"error": str(exc)}))
        return
    for chk in rep.checks[1:]:
        report.add(chk)
    kernel = mollifier_kernel(rep["sup_distance"].detail["delta"], u.grid)
    report.add(clarke_hull_check(u, kernel, 1e-6))
    if "csv" in fmts:
        g.to_csv(out / "smoothed.csv")
    if "json" in fmts:
        (out / "smoothed.json").write_text(g.to_json() + "\n")


def _finite_report(report: VerificationReport, command: str) -> dict:
    doc = report.to_dict()
    for chk in doc["checks"]:
        if not np.isfinite(chk["value"]):
            chk["value"] = float(np.finfo(float).max)
    doc["command"] = command
    return doc


def cmd_verify(args, cfg: dict) -> int:
    H = build_hamiltonian(cfg)
    u, c = load_artifacts(args, cfg)
    sol = _rebuild_solution(H, u, c, cfg)
    L = Lagrangian(H)
    opts = cfg.get("verify", {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    g = u.grid
    report = VerificationReport()
    report.add(check_subsolution(H, u, c, 5 * g.h))
    report.add(check_domination(L, u, c, opts.get("samples", 500), seed))
    count = min(opts.get("endpoints", 16), g.n)
    step = max(1, g.n // count)
    endpoints = [(i * step,) * g.dim for i in range(count)]
    horizon = min(opts.get("horizon", 200), len(sol.argmin_history))
    report.add(check_calibration(sol, L, endpoints, horizon))
    report.add(check_fixed_point(sol, 1e-6))
    report.add(check_evolution(L, u, sol.config, opts.get("evolution_steps", 100), strict=False))
    out = output_dir(args, cfg)
    if args.smooth is not None:
        _smoothing_checks(H, u, c, args.smooth, report, out, formats(cfg))
    write_report(out, "verify_report.json", _finite_report(report, "verify"), "check_report")
    for chk in report.checks:
        print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.value:.3e} (tol {chk.tol:.3e})")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_smooth(args, cfg: dict) -> int:
    if args.smooth is None:
        raise ConfigError("smooth needs --smooth EPS")
    if args.smooth <= 0:
        raise ConfigError("--smooth must be positive")
    H = build_hamiltonian(cfg)
    u, c = load_artifacts(args, cfg)
    out = output_dir(args, cfg)
    report = VerificationReport()
    report.add(check_subsolution(H, u, c, 5 * u.grid.h))
    _smoothing_checks(H, u, c, args.smooth, report, out, formats(cfg))
    write_report(out, "smooth_report.json", _finite_report(report, "smooth"), "check_report")
    for chk in report.checks:
        print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.value:.3e} (tol {chk.tol:.3e})")
    return EXIT_OK if report.passed else EXIT_VERIFY


def _vector(text: str | None, dim: int, flag: str) -> tuple:
    if text is None:
        raise ConfigError(f"flow needs {flag}")
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{flag} expects {dim} comma-separated numbers") from exc
    if len(vals) != dim:
        raise ConfigError(f"{flag} expects {dim} comma-separated numbers")
    return vals


def cmd_flow(args, cfg: dict) -> int:
    H = build_hamiltonian(cfg)
    dim = cfg["grid"]["dim"]
    start = PhasePoint(_vector(args.x, dim, "--x"), _vector(args.p, dim, "--p"))
    if args.t_end <= 0 or args.dt <= 0:
        raise ConfigError("--t-end and --dt must be positive")
    traj = integrate(H, start, args.t_end, args.dt)
    consts = estimate_constants(H)
    bound = momentum_bound_check(traj, consts)
    out = output_dir(args, cfg)
    if "csv" in formats(cfg):
        traj.to_csv(out / "trajectory.csv")
    report = {
        "command": "flow",
        "samples": len(traj.times),
        "t_end": float(args.t_end),
        "dt": float(args.dt),
        "energy_initial": float(traj.energy[0]),
        "energy_drift": traj.energy_drift,
        "momentum_bound": asdict(bound),
    }
    write_report(out, "flow_report.json", report, "flow_report")
    print(f"energy = {float(traj.energy[0])!r}, drift = {traj.energy_drift:.3e}")
    print(f"momentum bound {'holds' if bound.ok else 'violated'}: {bound.max_momentum:.6g} <= {bound.bound:.6g}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "alpha": cmd_alpha,
    "verify": cmd_verify,
    "flow": cmd_flow,
    "smooth": cmd_smooth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakkam", description="Weak KAM solutions on flat tori.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON problem configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for sampled checks (overrides the config)")
        if name in ("verify", "smooth"):
            p.add_argument("--artifacts", help="directory holding report.json and the solution")
            p.add_argument("--smooth", type=float, metavar="EPS", help="mollify the solution at tolerance EPS")
        if name == "alpha":
            p.add_argument("--omega-range", metavar="A:B:STEP", help="inclusive range of classes per axis")
        if name == "flow":
            p.add_argument("--x", help="start position, comma separated")
            p.add_argument("--p", help="start momentum, comma separated")
            p.add_argument("--t-end", type=float, default=10.0)
            p.add_argument("--dt", type=float, default=1e-3)
    return parser


def _join_negative_range(argv: list) -> list:
    # "--omega-range -2:2:0.1" would otherwise be read as an unknown flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--omega-range" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--omega-range={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_join_negative_range(argv))
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
