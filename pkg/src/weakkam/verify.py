"""
Grid-scale checks that a computed function is a viscosity solution, and
smoothing of Lipschitz subsolutions by mollification.

Random curves for :func:`check_domination` come from
``numpy.random.default_rng(seed)`` and are drawn in this order per curve:
total time ``T ~ U[0.1, 2]``, segment count ``m ~ U{2..8}``, start point
``~ U[0,1)^d``, then ``m`` velocities ``~ U[-v, v]^d`` with ``v = 2``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linprog

from .grid import (
    GridFunction,
    MollifierKernel,
    gradient_centered,
    interpolate,
    kink_mask,
    lipschitz_constant,
    mollifier_kernel,
    mollify,
    one_sided_differences,
)
from .hamiltonian import Hamiltonian, Lagrangian
from .lax_oleinik import (
    LaxOleinikConfig,
    WeakKamSolution,
    backtrack_minimizer,
    discrete_action,
    evolve,
    operator_for,
)


class VerificationError(ValueError):
    pass


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _node_coords(u: GridFunction) -> np.ndarray:
    return u.grid.coords()


def _subsolution_values(H: Hamiltonian, u: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """H at centered gradients, and the better one-sided value at kink nodes."""
    x = _node_coords(u)
    centered = np.asarray(H(x, gradient_centered(u)))
    fwd, bwd = one_sided_differences(u)
    d = u.grid.dim
    best = None
    for choice in np.ndindex(*(2,) * d):
        p = np.stack([(bwd if c else fwd)[..., a] for a, c in enumerate(choice)], axis=-1)
        val = np.asarray(H(x, p))
        best = val if best is None else np.minimum(best, val)
    return centered, best


def check_subsolution(H: Hamiltonian, u: GridFunction, c: float, tol: float) -> CheckResult:
    """max over nodes of ``H(x, Du) - c``; kink nodes use the better one-sided gradient."""
    centered, one_sided = _subsolution_values(H, u)
    kinks = kink_mask(u)
    vals = np.where(kinks, one_sided, centered) - c
    worst = float(np.max(vals))
    where = np.unravel_index(int(np.argmax(vals)), u.grid.shape)
    return CheckResult(
        "subsolution",
        worst,
        float(tol),
        worst <= tol,
        {"worst_node": [int(i) for i in where], "kink_nodes": int(kinks.sum())},
    )


def _segment_action(L: Lagrangian, a: np.ndarray, b: np.ndarray, dt: float, order: int = 8) -> float:
    """Gauss-Legendre integral of L along the straight segment from a to b."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * (nodes + 1.0)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    v = (b - a) / dt
    return float(0.5 * dt * np.sum(weights * L(pts, np.broadcast_to(v, pts.shape))))


def random_curves(dim: int, samples: int, seed: int, v_scale: float = 2.0):
    """Yield ``(vertices on the cover, segment time)`` for seeded random broken lines."""
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        T = rng.uniform(0.1, 2.0)
        m = int(rng.integers(2, 9))
        x0 = rng.uniform(0.0, 1.0, dim)
        vel = rng.uniform(-v_scale, v_scale, (m, dim))
        dt = T / m
        verts = np.vstack([x0, x0 + np.cumsum(vel * dt, axis=0)])
        yield verts, dt


def check_domination(
    L: Lagrangian,
    u: GridFunction,
    c: float,
    samples: int = 500,
    seed: int = 0,
    tol: float | None = None,
) -> CheckResult:
    """
    Largest ``u(b) - u(a) - int L - c (t_b - t_a)`` over random broken lines.
    Default tolerance ``5 h``.
    """
    if samples < 100:
        raise ValueError("need at least 100 sampled curves")
    tol = 5 * u.grid.h if tol is None else tol
    defects = []
    for verts, dt in random_curves(u.grid.dim, samples, seed):
        action = sum(_segment_action(L, verts[k], verts[k + 1], dt) for k in range(len(verts) - 1))
        T = dt * (len(verts) - 1)
        du = interpolate(u, verts[-1][None, :])[0] - interpolate(u, verts[0][None, :])[0]
        defects.append(du - action - c * T)
    defects = np.array(defects)
    worst = float(np.max(defects))
    return CheckResult(
        "domination",
        max(worst, 0.0),
        float(tol),
        worst <= tol,
        {"samples": samples, "seed": seed, "positive": int(np.sum(defects > 0)),
         "max_signed_defect": worst},
    )


def calibration_defects(
    solution: WeakKamSolution,
    L: Lagrangian,
    endpoints,
    horizon: int,
    history=None,
) -> np.ndarray:
    """``|u(x) - u(gamma(0)) - action(gamma) - c T|`` per backtracked endpoint."""
    hist = solution.argmin_history if history is None else history
    if not hist:
        raise VerificationError("solution carries no argmin history")
    g = solution.grid
    out = []
    for x in endpoints:
        path = backtrack_minimizer(hist, x, g, horizon)
        action = discrete_action(L, path, g, solution.tau, solution.config.quadrature)
        u_end = solution.u.values[tuple(path[-1])]
        u_start = solution.u.values[tuple(path[0])]
        out.append(abs(u_end - u_start - action - solution.c * horizon * solution.tau))
    return np.array(out)


def check_calibration(
    solution: WeakKamSolution,
    L: Lagrangian,
    endpoints,
    horizon: int,
    tol: float | None = None,
    history=None,
) -> CheckResult:
    tol = 10 * solution.grid.h if tol is None else tol
    defects = calibration_defects(solution, L, endpoints, horizon, history)
    worst = float(np.max(defects))
    return CheckResult("calibration", worst, float(tol), worst <= tol,
                       {"endpoints": len(defects), "horizon": horizon})


def check_fixed_point(solution: WeakKamSolution, tol: float) -> CheckResult:
    op = operator_for(Lagrangian(solution.hamiltonian), solution.grid, solution.config)
    Tu, _ = op.step_values(solution.u.values, strict=False, want_argmin=False)
    res = float(np.max(np.abs(Tu - solution.u.values + solution.c * solution.tau)))
    return CheckResult("fixed_point", res, float(tol), res <= tol)


def _kink_band(traj, k: int, H: Hamiltonian, x: np.ndarray, tau: float) -> np.ndarray:
    """
    Nodes a kink can reach during the time stencil ``k-1 .. k+1``: kink masks
    at the three levels, widened by the largest characteristic speed
    ``|dH/dp|`` times one step.
    """
    g = traj[k].grid
    grad = gradient_centered(traj[k])
    speed = float(np.max(np.linalg.norm(H.dH_dp(x, grad), axis=-1)))
    width = int(np.ceil(speed * tau / g.h)) + 1
    mask = kink_mask(traj[k - 1]) | kink_mask(traj[k]) | kink_mask(traj[k + 1])
    if not np.any(mask):
        return mask
    return maximum_filter(mask.astype(np.uint8), size=2 * width + 1, mode="wrap").astype(bool)


def check_evolution(
    L: Lagrangian,
    u0: GridFunction,
    cfg: LaxOleinikConfig,
    steps: int,
    tol: float | None = None,
    strict: bool = True,
) -> CheckResult:
    """
    Time-centered residual ``(u_{k+1} - u_{k-1}) / (2 tau) + H(x, Du_k)`` at
    interior times, away from kinks.  Kinks travel, so the excluded band
    around each one is as wide as a characteristic moves in one step.
    """
    H = L.hamiltonian
    g = u0.grid
    tol = max(10 * g.h, 10 * cfg.tau) if tol is None else tol
    traj = evolve(L, u0, cfg, steps, strict)
    x = _node_coords(u0)
    worst = 0.0
    excluded = 0
    for k in range(1, steps):
        dt_u = (traj[k + 1].values - traj[k - 1].values) / (2 * cfg.tau)
        res = np.abs(dt_u + np.asarray(H(x, gradient_centered(traj[k]))))
        mask = ~_kink_band(traj, k, H, x, cfg.tau)
        excluded = max(excluded, int(np.sum(~mask)))
        if np.any(mask):
            worst = max(worst, float(np.max(res[mask])))
    return CheckResult("evolution", worst, float(tol), worst <= tol,
                       {"steps": steps, "max_excluded_nodes": excluded})


def _hull_contains(points: np.ndarray, target: np.ndarray, tol: float) -> bool:
    """Is ``target`` within ``tol`` (sup-norm) of the convex hull of ``points``?"""
    if points.shape[1] == 1:
        return bool(points.min() - tol <= target[0] <= points.max() + tol)
    m, d = points.shape
    # variables: lambda (m), slack s (d) ; |P^T lambda - t| <= s, minimise max s via one bound
    A_eq = np.vstack([np.hstack([points.T, -np.eye(d), np.eye(d)]), np.hstack([np.ones(m), np.zeros(2 * d)])])
    b_eq = np.concatenate([target, [1.0]])
    cost = np.concatenate([np.zeros(m), np.ones(2 * d)])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * (m + 2 * d), method="highs")
    if not res.success:
        return False
    slack = res.x[m:]
    return bool(np.max(slack[:d] + slack[d:]) <= tol + 1e-12)


def clarke_hull_check(u: GridFunction, kernel: MollifierKernel, tol: float = 1e-6) -> CheckResult:
    """
    The centered gradient of ``mollify(u)`` at each node lies in the convex
    hull of difference quotients of ``u`` over the kernel support: forward
    differences in 1D, centered gradients in 2D.
    """
    g = u.grid
    smooth = mollify(u, kernel)
    grad = gradient_centered(smooth)
    r = kernel.radius_cells
    worst_node = None
    if g.dim == 1:
        fwd, _ = one_sided_differences(u)
        fwd = fwd[..., 0]
        # forward quotient at i-j-1 and i-j both feed node i for each kernel offset j
        lo = np.full(g.shape, np.inf)
        hi = np.full(g.shape, -np.inf)
        for j in range(-r, r + 2):
            shifted = np.roll(fwd, j)
            lo = np.minimum(lo, shifted)
            hi = np.maximum(hi, shifted)
        excess = np.maximum(lo - grad[..., 0], grad[..., 0] - hi)
        worst = float(np.max(excess))
        ok = worst <= tol
        if not ok:
            worst_node = [int(np.argmax(excess))]
    else:
        cg = gradient_centered(u)
        ok, worst = True, 0.0
        offs = kernel.offsets
        for idx in np.ndindex(*g.shape):
            pts = np.array([cg[tuple((np.array(idx) - o) % g.n)] for o in offs])
            target = grad[idx]
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            box = float(np.max(np.maximum(lo - target, target - hi)))
            worst = max(worst, box)
            if box > tol or not _hull_contains(pts, target, tol):
                ok = False
                worst_node = list(idx)
                break
    return CheckResult("clarke_hull", max(worst, 0.0), float(tol), ok,
                       {"worst_node": worst_node} if worst_node else {})


def smooth_subsolution(
    H: Hamiltonian,
    u: GridFunction,
    c: float,
    epsilon: float,
    tol: float | None = None,
    pre_tol: float | None = None,
) -> tuple[GridFunction, VerificationReport]:
    """
    Mollify a Lipschitz subsolution of ``H(x, Du) <= c`` into a smooth ``g``
    with ``|g - u| <= epsilon`` and ``H(x, Dg) <= c + epsilon (+ tol)``.

    The kernel radius is ``min(epsilon / (2 Lip(u)), 1/8 of the period)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grid = u.grid
    tol = 5 * grid.h if tol is None else tol
    pre_tol = 5 * grid.h if pre_tol is None else pre_tol
    pre = check_subsolution(H, u, c, pre_tol)
    if not pre.passed:
        raise VerificationError(
            f"input is not a subsolution at level {c}: violation {pre.value:.3g} > {pre_tol:.3g}"
        )
    lip = max(lipschitz_constant(u), 1e-300)
    delta = min(epsilon / (2 * lip), grid.length / 8)
    if delta < grid.h:
        raise VerificationError(
            f"epsilon={epsilon} gives a kernel radius {delta:.3g} under one cell ({grid.h:.3g})"
        )
    kernel = mollifier_kernel(delta, grid)
    smooth = mollify(u, kernel)
    report = VerificationReport()
    report.add(pre)
    dist = float(np.max(np.abs(smooth.values - u.values)))
    report.add(CheckResult("sup_distance", dist, float(epsilon), dist <= epsilon,
                           {"delta": delta, "lipschitz": lip, "bound": lip * delta}))
    Hg = np.asarray(H(_node_coords(smooth), gradient_centered(smooth))) - c
    worst = float(np.max(Hg))
    report.add(CheckResult("smoothed_subsolution", worst, float(epsilon + tol), worst <= epsilon + tol))
    return smooth, report


def check_below_critical(
    L: Lagrangian,
    grid,
    cfg: LaxOleinikConfig,
    c_forced: float,
    steps: int = 200,
    u0: GridFunction | None = None,
) -> CheckResult:
    """
    Iterate ``u <- T u + c_forced tau`` without normalisation.  Below the
    critical value the anchor value decreases without bound; the result
    records the per-step slope (negative means divergence).
    """
    op = operator_for(L, grid, cfg)
    u = np.zeros(grid.shape) if u0 is None else np.array(u0.values)
    anchor = grid.wrap_index(cfg.anchor)
    trace = [float(u[anchor])]
    for _ in range(steps):
        Tu, _ = op.step_values(u, strict=False, want_argmin=False)
        u = Tu + c_forced * cfg.tau
        trace.append(float(u[anchor]))
    trace = np.array(trace)
    tail = trace[steps // 2:]
    slope = float(np.polyfit(np.arange(len(tail)), tail, 1)[0])
    monotone = bool(np.all(np.diff(tail) < 0))
    return CheckResult("below_critical_divergence", slope, 0.0, monotone and slope < 0,
                       {"c_forced": c_forced, "final": float(trace[-1])})


def verify_solution(
    solution: WeakKamSolution,
    samples: int = 500,
    seed: int = 0,
    endpoints=None,
    horizon: int | None = None,
    residual_tol: float = 1e-6,
    evolution_steps: int = 100,
) -> VerificationReport:
    """Run the subsolution, domination, calibration, fixed-point and evolution checks."""
    H = solution.hamiltonian
    L = Lagrangian(H)
    g = solution.grid
    h = g.h
    report = VerificationReport()
    report.add(check_subsolution(H, solution.u, solution.c, 5 * h))
    report.add(check_domination(L, solution.u, solution.c, samples, seed))
    if endpoints is None:
        step = max(1, g.n // 16)
        endpoints = [(i * step,) * g.dim for i in range(min(16, g.n))]
    if horizon is None:
        horizon = min(200, len(solution.argmin_history))
    if solution.argmin_history:
        report.add(check_calibration(solution, L, endpoints, horizon))
    report.add(check_fixed_point(solution, residual_tol))
    report.add(check_evolution(L, solution.u, solution.config, evolution_steps, strict=False))
    return report
