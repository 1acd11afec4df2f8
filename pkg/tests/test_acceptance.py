"""
Acceptance criteria, one test each.  Every test records a line in
``conftest.ACCEPTANCE_LINES`` before asserting, and the terminal summary
prints them as ``criterion NN: PASS/FAIL``.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, PENDULUM
from weakkam import (
    GridFunction,
    LaxOleinikConfig,
    PeriodicGrid,
    PhasePoint,
    alpha_oracle_1d,
    alpha_sweep,
    check_calibration,
    check_domination,
    check_evolution,
    clarke_hull_check,
    convexity_check,
    estimate_constants,
    integrate,
    lagrangian,
    lo_step,
    mechanical,
    mollifier_kernel,
    momentum_bound_check,
    shifted,
    smooth_subsolution,
    solve_equivariant,
    solve_invariant,
    solve_weak_kam,
    superlinearity_check,
)
from weakkam.grid import lipschitz_constant
from weakkam.mather import flat_piece, omega_range
from weakkam.verify import check_fixed_point

REFERENCE = LaxOleinikConfig(tau=0.02)
# identities of the pointwise minimum hold up to rounding of u(y) + cost
ULPS = 4 * np.spacing(16.0)


def record(number, passed, text):
    ACCEPTANCE_LINES[number] = (bool(passed), text)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {text}")
    return bool(passed)


def residual_of(L, u, cfg, c):
    Tu, _ = lo_step(L, u, cfg, strict=False)
    return float(np.max(np.abs(Tu.values - u.values + c * cfg.tau)))


def test_01_mechanical_critical_value(grid256):
    parts, ok = [], True
    for amp, lo, hi in ((1, 0.99, 1.01), (2, 1.98, 2.02)):
        t0 = time.perf_counter()
        sol = solve_weak_kam(mechanical(f"{amp}*cos(2*pi*x)"), grid256, REFERENCE)
        elapsed = time.perf_counter() - t0
        ok &= sol.converged and lo <= sol.c <= hi and elapsed < 10.0
        parts.append(f"amp {amp}: c={sol.c:.6f} in [{lo}, {hi}], {elapsed:.2f}s")
    assert record(1, ok, "; ".join(parts))


def test_02_semigroup_laws(pendulum):
    g = PeriodicGrid(1, 64)
    L = lagrangian(pendulum)
    cfg = LaxOleinikConfig(tau=0.05, v_max=8.0)
    rng = np.random.default_rng(2)

    def T(values):
        return lo_step(L, GridFunction(g, values), cfg, strict=False)[0].values

    failures = {"monotone": 0, "constants": 0, "non-expansive": 0}
    for _ in range(100):
        a = rng.uniform(-3, 3, g.n)
        b = a + rng.uniform(0, 2, g.n)  # b >= a
        other = rng.uniform(-3, 3, g.n)
        k = rng.uniform(-10, 10)
        Ta = T(a)
        failures["monotone"] += not np.all(Ta <= T(b))
        failures["constants"] += not np.max(np.abs(T(a + k) - (Ta + k))) <= ULPS
        failures["non-expansive"] += not np.max(np.abs(Ta - T(other))) <= np.max(np.abs(a - other)) + ULPS
    total = sum(failures.values())
    assert record(2, total == 0, f"100 random functions, failures {failures}")


def test_03_fixed_point(pendulum_solution, pendulum):
    sol = pendulum_solution
    L = lagrangian(pendulum)
    fp = check_fixed_point(sol, 1e-6)
    g = sol.grid
    x = g.coords()[..., 0]
    # a bump of height 20h spanning a few cells, narrower than the search window
    width = 4 * g.h
    bump = 20 * g.h * np.clip(1 - np.abs(x - 0.3) / width, 0, None)
    bumped = GridFunction(g, sol.u.values + bump)
    raised = residual_of(L, bumped, sol.config, sol.c) - fp.value
    ok = fp.passed and raised >= 5 * g.h
    assert record(3, ok, f"residual {fp.value:.2e} <= 1e-6; bump raises it by {raised:.4f} >= 5h={5 * g.h:.4f}")


def test_04_below_critical(pendulum_solution, pendulum):
    sol = pendulum_solution
    res = check_domination(lagrangian(pendulum), sol.u, sol.c - 0.1, samples=500, seed=0)
    positive = res.detail["positive"]
    assert record(4, not res.passed and positive >= 1, f"at c-0.1: {positive}/500 curves with positive defect")


def test_05_lipschitz(pendulum_solution, pendulum):
    sol = pendulum_solution
    lip = lipschitz_constant(sol.u)
    bound = 1.1 * (sol.c + estimate_constants(pendulum).A(1))
    assert record(5, lip <= bound, f"Lip(u)={lip:.4f} <= 1.1(c+A(1))={bound:.4f}")


def test_06_alpha_flat_piece_and_tail(pendulum, grid256):
    t0 = time.perf_counter()
    table = alpha_sweep(pendulum, omega_range(-2.0, 2.0, 0.1), grid256, REFERENCE)
    elapsed = time.perf_counter() - t0
    w = np.abs(table.omegas[:, 0])
    flat_err = float(np.max(np.abs(table.alphas[w <= 1.2 + 1e-9] - 1.0)))
    tail_err = abs(table.lookup(2.0) - alpha_oracle_1d(PENDULUM, 2.0))
    boundary = flat_piece(table, 1.0).boundary
    ok = (
        len(table) == 41
        and flat_err <= 1e-2
        and tail_err <= 1e-2
        and abs(boundary - 4 / math.pi) <= 0.05
        and elapsed < 300
    )
    text = (
        f"flat |alpha-1|={flat_err:.1e}, tail error {tail_err:.1e}, boundary {boundary:.4f} "
        f"vs 4/pi={4 / math.pi:.4f}, 41 points in {elapsed:.1f}s"
    )
    assert record(6, ok, text)


@pytest.mark.xfail(
    strict=True,
    reason="alpha(w)/|w| is about 3.0 at |w|=6 (alpha(6) is close to 18), so K=4 cannot pass on |w| <= 6",
)
def test_07_convexity_and_superlinearity(alpha41, alpha_wide, pendulum):
    tol = 3 * REFERENCE.tol
    conv = convexity_check(alpha41, tol)
    sup = superlinearity_check(alpha_wide, [1.0, 2.0, 4.0], H=pendulum)
    ok = conv.passed and sup.passed
    text = (
        f"convexity worst {conv.worst_defect:.1e} (tol {tol:.0e}) {'ok' if conv.passed else 'fails'}; "
        f"alpha/|w| at |w|=6 is {sup.ratio:.3f}, needs > 4"
    )
    assert record(7, ok, text)


def test_08_equivariant_shift_identity(pendulum, grid256):
    rng = np.random.default_rng(8)
    rhos = rng.uniform(-3, 3, 10)
    mismatched = [r for r in rhos if solve_equivariant(pendulum, r, grid256, REFERENCE).c
                  != solve_weak_kam(shifted(pendulum, r), grid256, REFERENCE).c]
    assert record(8, not mismatched, f"10 random rho in [-3, 3], {len(mismatched)} bitwise mismatches")


def test_09_invariant_solve(grid256):
    H = mechanical("cos(4*pi*x)")
    inv = solve_invariant(H, 2, grid256, REFERENCE)
    plain = solve_weak_kam(H, grid256, REFERENCE)
    half = grid256.n // 2
    period_err = float(np.max(np.abs(inv.u.values[:half] - inv.u.values[half:])))
    ok = abs(inv.c - 1.0) <= 1e-2 and abs(plain.c - 1.0) <= 1e-2 and period_err <= 1e-9
    assert record(9, ok, f"c_inv={inv.c:.6f}, c={plain.c:.6f}, half-period defect {period_err:.1e}")


def test_10_energy_and_momentum(pendulum):
    consts = estimate_constants(pendulum)
    ref = integrate(pendulum, PhasePoint((0.0,), (2.0,)), 10.0, 1e-3)
    rng = np.random.default_rng(10)
    failed = 0
    for _ in range(20):
        start = PhasePoint((rng.uniform(0, 1),), (rng.uniform(-3, 3),))
        failed += not momentum_bound_check(integrate(pendulum, start, 10.0, 1e-3), consts).ok
    ok = ref.energy_drift < 1e-6 and failed == 0
    assert record(10, ok, f"drift {ref.energy_drift:.1e} < 1e-6; momentum bound failed on {failed}/20 starts")


def test_11_calibration(pendulum_solution, pendulum):
    sol = pendulum_solution
    ends = [(16 * i,) for i in range(16)]
    res = check_calibration(sol, lagrangian(pendulum), ends, 200)
    tol = 10 * sol.grid.h
    assert record(11, res.value <= tol, f"max defect {res.value:.2e} <= 10h={tol:.4f} (16 endpoints, 200 steps)")


def test_12_evolution(pendulum_solution, pendulum):
    sol = pendulum_solution
    tol = max(10 * sol.grid.h, 10 * sol.tau)
    res = check_evolution(lagrangian(pendulum), sol.u, sol.config, 100)
    assert record(12, res.value <= tol, f"residual {res.value:.4f} <= max(10h, 10tau)={tol:.4f} over 100 steps")


def test_13_smoothing(pendulum_midpoint, pendulum):
    sol = pendulum_midpoint
    eps = 0.05
    g, rep = smooth_subsolution(pendulum, sol.u, sol.c, eps)
    dist = rep["sup_distance"].value
    viol = rep["smoothed_subsolution"].value
    kernel = mollifier_kernel(rep["sup_distance"].detail["delta"], sol.grid)
    hull = clarke_hull_check(sol.u, kernel, 1e-6)
    ok = dist <= eps and viol <= eps + 5 * sol.grid.h and hull.passed
    text = (
        f"|g-u|={dist:.4f} <= 0.05; max H(x,Dg)-c={viol:.4f} <= eps+5h={eps + 5 * sol.grid.h:.4f}; "
        f"hull defect {hull.value:.1e} <= 1e-6"
    )
    assert record(13, ok, text)
