"""
Hamiltonian trajectories, energy diagnostics and discrete action
minimisation between fixed endpoints.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .hamiltonian import Hamiltonian, Lagrangian, TonelliConstants, as_points
from .lax_oleinik import QUADRATURE

logger = logging.getLogger(__name__)


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhasePoint:
    x: tuple
    p: tuple

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.p))):
            raise ValueError("phase point components must be finite")


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)  # (N, d), wrapped to [0, 1)
    p: np.ndarray = field(repr=False)  # (N, d)
    energy: np.ndarray = field(repr=False)

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))

    def to_csv(self, path: str | Path) -> None:
        d = self.x.shape[1]
        names = ["t"] + [f"x{k + 1}" for k in range(d)] + [f"p{k + 1}" for k in range(d)] + ["energy"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for t, x, p, e in zip(self.times, self.x, self.p, self.energy):
                w.writerow([repr(float(t))] + [repr(float(a)) for a in x]
                           + [repr(float(a)) for a in p] + [repr(float(e))])


def integrate(H: Hamiltonian, start: PhasePoint, t_end: float, dt: float) -> Trajectory:
    """Classical RK4 for ``x' = dH/dp, p' = -dH/dx``; positions wrapped to the torus."""
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    d = H.dim
    steps = int(round(t_end / dt))
    x = as_points(start.x, d).reshape(d).copy()
    p = as_points(start.p, d).reshape(d).copy()

    def rhs(x, p):
        return H.dH_dp(x, p).reshape(d), -H.dH_dx(x, p).reshape(d)

    xs = np.empty((steps + 1, d))
    ps = np.empty((steps + 1, d))
    xs[0], ps[0] = np.mod(x, 1.0), p
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            k1x, k1p = rhs(x, p)
            k2x, k2p = rhs(x + 0.5 * dt * k1x, p + 0.5 * dt * k1p)
            k3x, k3p = rhs(x + 0.5 * dt * k2x, p + 0.5 * dt * k2p)
            k4x, k4p = rhs(x + dt * k3x, p + dt * k3p)
            x = np.mod(x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x), 1.0)
            p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise FlowError(f"non-finite state at t={(k + 1) * dt:.6g}")
        xs[k + 1], ps[k + 1] = x, p
    times = np.arange(steps + 1) * dt
    energy = np.asarray(H(xs, ps), dtype=float)
    return Trajectory(times, xs, ps, energy)


@dataclass(frozen=True)
class MomentumBoundReport:
    ok: bool
    max_momentum: float
    bound: float


def momentum_bound_check(traj: Trajectory, consts: TonelliConstants, tol: float = 1e-9) -> MomentumBoundReport:
    """``max |p(s)| <= C*(1) + max energy`` along the trajectory."""
    max_p = float(np.max(np.linalg.norm(traj.p, axis=1)))
    bound = consts.C_star(1.0) + float(np.max(traj.energy))
    return MomentumBoundReport(max_p <= bound + tol, max_p, bound)


@dataclass(frozen=True, eq=False)
class ActionResult:
    curve: np.ndarray  # (segments + 1, d), on the cover starting at a
    action: float
    grad_norm: float
    iterations: int
    converged: bool


def _action_and_grad(L: Lagrangian, pts: np.ndarray, tau: float, back: float = 0.0):
    """Action ``sum tau L(x_{k+1} - back (x_{k+1} - x_k), (x_{k+1} - x_k)/tau)`` and its gradient."""
    vel = np.diff(pts, axis=0) / tau
    at = (1.0 - back) * pts[1:] + back * pts[:-1]
    S = float(np.sum(tau * L(at, vel)))
    dLdx, dLdv = L.hamiltonian.lagrangian_grad(at, vel)
    grad = np.zeros_like(pts)
    grad[1:] += (1.0 - back) * tau * dLdx + dLdv
    grad[:-1] += back * tau * dLdx - dLdv
    return S, grad


def minimize_action(
    L: Lagrangian,
    a,
    b,
    T: float,
    segments: int = 64,
    init: np.ndarray | None = None,
    gtol: float = 1e-8,
    max_iter: int = 5000,
    quadrature: str = "endpoint",
) -> ActionResult:
    """
    Minimise the broken-line action with fixed endpoints.

    Interior nodes live on the cover; ``b`` is lifted to ``a + (b - a)``
    with the minimal periodic representative.  The initial curve is the
    uniform straight segment unless ``init`` is given.  Descent directions
    are gradients preconditioned by the kinetic tridiagonal, with an
    Armijo backtracking line search.  ``quadrature`` places L on each
    segment as in :class:`~weakkam.lax_oleinik.LaxOleinikConfig`.
    """
    if T <= 0 or segments < 8:
        raise ValueError("need T > 0 and at least 8 segments")
    d = L.dim
    a = as_points(a, d).reshape(d)
    b = as_points(b, d).reshape(d)
    db = b - a
    db = db - np.round(db)
    tau = T / segments
    back = QUADRATURE[quadrature]
    if init is None:
        s = np.linspace(0.0, 1.0, segments + 1)[:, None]
        pts = a + s * db
    else:
        pts = np.array(init, dtype=float).reshape(segments + 1, d)
    m = segments - 1
    band = np.zeros((3, m))
    band[0, 1:] = -1.0 / tau
    band[1, :] = 2.0 / tau
    band[2, :-1] = -1.0 / tau

    S, g = _action_and_grad(L, pts, tau, back)
    converged = False
    it = 0
    for it in range(max_iter):
        gi = g[1:-1]
        gnorm = float(np.max(np.abs(gi))) if m else 0.0
        if gnorm < gtol:
            converged = True
            break
        direction = -solve_banded((1, 1), band, gi)
        slope = float(np.sum(direction * gi))
        if slope >= 0:
            direction, slope = -gi, -float(np.sum(gi * gi))
        step = 1.0
        while True:
            trial = pts.copy()
            trial[1:-1] += step * direction
            S_new, g_new = _action_and_grad(L, trial, tau, back)
            if S_new <= S + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-14:
                logger.warning("line search failed at iteration %d", it)
                return ActionResult(pts, S, gnorm, it, False)
        pts, S, g = trial, S_new, g_new
    gnorm = float(np.max(np.abs(g[1:-1]))) if m else 0.0
    return ActionResult(pts, S, gnorm, it, converged or gnorm < gtol)
