"""
Discrete backward Lax-Oleinik operator on a periodic grid, and critical
value solvers built on its fixed points modulo constants.

One step of length ``tau`` minimises over straight segments ending at a node::

    T u(x_i) = min_y  u(y) + tau * L(x_i, (x_i - y) / tau)

where ``y`` ranges over nodes within periodic distance ``tau * v_max`` and
``x_i - y`` is the minimal periodic representative.  L is evaluated at the
endpoint by default, so ``T 0 = -tau V`` exactly for mechanical
Hamiltonians.  ``quadrature="midpoint"`` evaluates it at the segment midpoint
instead, which removes the first-order consistency error in ``tau``.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridFunction, PeriodicGrid
from .hamiltonian import (
    Hamiltonian,
    Lagrangian,
    Mechanical,
    Shifted,
    as_points,
    default_v_max,
    locality_constants,
    shifted,
)

logger = logging.getLogger(__name__)


class LaxOleinikError(RuntimeError):
    pass


class WindowBoundaryHit(LaxOleinikError):
    """A discrete minimiser sits on the edge of the search window."""


class NotConverged(LaxOleinikError):
    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


class NotInvariant(ValueError):
    pass


# fraction of the segment, measured back from its end, where L is evaluated
QUADRATURE = {"endpoint": 0.0, "midpoint": 0.5}


@dataclass(frozen=True)
class LaxOleinikConfig:
    """
    tau, v_max: step length and velocity bound; either may be None and is then
    filled in by :func:`resolve_config` (v_max = A(0) + C(theta + 1) with theta
    bounded through c(H) <= C(0); tau = 0.8 h^(2/3)).
    relax: Krasnoselskii averaging weight in (0, 1]; 1 is plain iteration.
        None (default) runs plain iteration for ``plain_iter`` sweeps.  If
        that has not converged (typical when the critical cycle winds around
        the torus and the plain iterates never settle), Howard policy
        iteration is run from the current greedy policy when
        ``policy_iteration`` is set, and any remaining sweeps use weight 1/2.
    history: number of argmin maps kept from the final sweeps.
    quadrature: "endpoint" or "midpoint", where along each segment L is evaluated.
    """

    tau: float | None = None
    v_max: float | None = None
    refine: bool = False
    anchor: int | tuple = 0
    tol: float = 1e-8
    max_iter: int = 50_000
    relax: float | None = None
    plain_iter: int = 100
    policy_iteration: bool = True
    history: int = 256
    quadrature: str = "endpoint"

    def validate(self, grid: PeriodicGrid) -> None:
        if self.tau is None or self.v_max is None:
            raise ValueError("tau and v_max must be resolved before use")
        if self.tau <= 0 or self.v_max <= 0:
            raise ValueError("tau and v_max must be positive")
        if self.tau * self.v_max < grid.h:
            raise ValueError(
                f"tau*v_max = {self.tau * self.v_max:.3g} is below one cell "
                f"({grid.h:.3g}); the operator would be the identity"
            )
        if self.quadrature not in QUADRATURE:
            raise ValueError(f"quadrature must be one of {sorted(QUADRATURE)}")
        if self.relax is not None and not 0 < self.relax <= 1:
            raise ValueError("relax must lie in (0, 1]")


def resolve_config(cfg: LaxOleinikConfig, H: Hamiltonian, grid: PeriodicGrid) -> LaxOleinikConfig:
    v_max = cfg.v_max
    if v_max is None:
        v_max = default_v_max(locality_constants(H))
    tau = cfg.tau
    if tau is None:
        tau = 0.8 * grid.h ** (2.0 / 3.0) * grid.length ** (1.0 / 3.0)
    out = replace(cfg, tau=float(tau), v_max=float(v_max))
    out.validate(grid)
    return out


class LaxOleinikOperator:
    """
    The one-step operator with its candidate stencil and cost table
    precomputed.  Apply it with :meth:`step`.
    """

    def __init__(self, L: Lagrangian, grid: PeriodicGrid, cfg: LaxOleinikConfig):
        cfg.validate(grid)
        self.L, self.grid, self.cfg = L, grid, cfg
        d, n, h, tau = grid.dim, grid.n, grid.h, cfg.tau
        r = int(math.floor(cfg.tau * cfg.v_max / h + 1e-9))
        half = (n - 1) // 2  # keeps the minimal representative unique
        self.capped = r > half
        self.radius = min(r, half) if d == 1 else r
        ax = np.arange(-min(r, half), min(r, half) + 1)
        offs = np.stack(np.meshgrid(*[ax] * d, indexing="ij"), axis=-1).reshape(-1, d)
        norms = np.linalg.norm(offs, axis=1)
        if d > 1:
            keep = norms <= r + 1e-9
            offs, norms = offs[keep], norms[keep]
            self.capped = r > half
        # stencil edge: the outermost ring of admissible offsets
        self.edge = norms > self.radius - 1 + 1e-9 if not self.capped else np.zeros(len(offs), bool)
        self.offsets = offs
        nodes = grid.coords().reshape(-1, d)
        vel = offs * h / tau
        back = QUADRATURE[cfg.quadrature] * tau
        self.cost = tau * L(nodes[:, None, :] - back * vel[None, :, :], vel[None, :, :])  # (N, K)
        if not np.all(np.isfinite(self.cost)):
            raise LaxOleinikError("non-finite Lagrangian value in the cost table")
        idx = np.indices(grid.shape).reshape(d, -1).T  # (N, d)
        src = np.mod(idx[:, None, :] - offs[None, :, :], n)
        self.source = np.ravel_multi_index(tuple(np.moveaxis(src, -1, 0)), grid.shape)  # (N, K)

    def step_values(self, u: np.ndarray, strict: bool = True, want_argmin: bool = True):
        """Return ``(Tu, argmin)`` for a flat or shaped value array.

        ``argmin`` is the row-major flat index of the chosen origin per node
        (None when ``want_argmin`` is false).
        """
        flat = np.asarray(u, dtype=float).reshape(-1)
        cand = flat[self.source] + self.cost
        k = np.argmin(cand, axis=1)
        best = cand[np.arange(cand.shape[0]), k]
        if strict and not self.capped:
            hit = self.edge[k]
            if np.any(hit):
                node = int(np.flatnonzero(hit)[0])
                raise WindowBoundaryHit(
                    f"minimiser on the window edge at node {np.unravel_index(node, self.grid.shape)}; "
                    f"increase v_max (currently {self.cfg.v_max:.4g})"
                )
        arg_src = None
        if want_argmin:
            # ties resolved towards the smallest (row-major) source index
            tied = cand == best[:, None]
            big = np.iinfo(np.int64).max
            arg_src = np.where(tied, self.source, big).min(axis=1).reshape(self.grid.shape)
        if self.cfg.refine:
            best = self._refine(cand, best, k)
        return best.reshape(self.grid.shape), arg_src

    def _refine(self, cand, best, k):
        """Parabolic sub-cell refinement along each axis of the stencil."""
        d = self.grid.dim
        rows = np.arange(cand.shape[0])
        lookup = {tuple(o): j for j, o in enumerate(self.offsets)}
        out = best.copy()
        for a in range(d):
            e = np.zeros(d, int)
            e[a] = 1
            plus = np.array([lookup.get(tuple(o + e), -1) for o in self.offsets])
            minus = np.array([lookup.get(tuple(o - e), -1) for o in self.offsets])
            kp, km = plus[k], minus[k]
            ok = (kp >= 0) & (km >= 0)
            fp = np.where(ok, cand[rows, np.where(ok, kp, 0)], best)
            fm = np.where(ok, cand[rows, np.where(ok, km, 0)], best)
            curv = fm - 2 * best + fp
            gain = np.where(ok & (curv > 0), (fp - fm) ** 2 / (8 * np.where(curv > 0, curv, 1.0)), 0.0)
            out = out - gain
        return out

    def step(self, u: GridFunction, strict: bool = True):
        Tu, arg = self.step_values(u.values, strict)
        return GridFunction(self.grid, Tu), arg


_OPERATORS: dict = {}


def operator_for(L: Lagrangian, grid: PeriodicGrid, cfg: LaxOleinikConfig) -> LaxOleinikOperator:
    """Cached :class:`LaxOleinikOperator` (the cost table is the expensive part)."""
    key = (L, grid, cfg)
    op = _OPERATORS.get(key)
    if op is None:
        if len(_OPERATORS) >= 32:
            _OPERATORS.clear()
        op = _OPERATORS[key] = LaxOleinikOperator(L, grid, cfg)
    return op


def lo_step(L: Lagrangian, u: GridFunction, cfg: LaxOleinikConfig, strict: bool = True):
    """One backward Lax-Oleinik step.  Returns ``(Tu, argmin)``.

    ``argmin`` holds, per node, the row-major flat index of the chosen
    origin ``y``.  With ``strict`` a minimiser on the window edge raises
    :class:`WindowBoundaryHit`.
    """
    return operator_for(L, u.grid, cfg).step(u, strict)


@dataclass(frozen=True, eq=False)
class WeakKamSolution:
    u: GridFunction
    c: float
    residual: float
    iterations: int
    converged: bool
    tau: float
    config: LaxOleinikConfig
    drift_trace: list = field(repr=False, default_factory=list)
    argmin_maps: list | None = field(repr=False, default=None)
    hamiltonian: Hamiltonian | None = field(repr=False, default=None)
    rho: tuple | None = None

    @property
    def grid(self) -> PeriodicGrid:
        return self.u.grid

    @functools.cached_property
    def argmin_history(self) -> list:
        """Argmin maps of ``config.history`` sweeps started at ``u`` (computed on first use)."""
        if self.argmin_maps is not None:
            return self.argmin_maps
        if self.hamiltonian is None:
            return []
        op = operator_for(Lagrangian(self.hamiltonian), self.grid, self.config)
        return sweep_history(op, self.u.values, self.grid.wrap_index(self.config.anchor), self.config.history)

    def equivariant_values(self, lift: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """``rho . x + u(x)`` on ``[0, lift)^d``; returns ``(coords, values)``."""
        rho = np.zeros(self.grid.dim) if self.rho is None else np.asarray(self.rho)
        g = self.grid
        tiles = np.tile(self.u.values, (lift,) * g.dim)
        axes = [np.arange(g.n * lift) * g.h] * g.dim
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return X, X @ rho + tiles

    def report(self) -> dict:
        return {
            "c": self.c,
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "grid": self.grid.to_dict(),
            "tau": self.tau,
            "v_max": self.config.v_max,
            "drift_trace": list(self.drift_trace),
        }


def _evaluate_policy(succ: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Cycle mean ``eta`` and bias ``v`` of a functional graph ``i -> succ[i]``
    with edge weight ``w[i]``, so that ``v[i] = w[i] - eta[i] + v[succ[i]]``.
    The first node met on each cycle gets bias 0.
    """
    n = len(succ)
    state = np.zeros(n, np.int8)  # 0 new, 1 on the current path, 2 done
    eta = np.empty(n)
    v = np.empty(n)
    for start in range(n):
        if state[start]:
            continue
        path = []
        i = start
        while state[i] == 0:
            state[i] = 1
            path.append(i)
            i = int(succ[i])
        if state[i] == 1:
            j = path.index(i)
            cycle = path[j:]
            mean = float(np.sum(w[cycle])) / len(cycle)
            v[i] = 0.0
            eta[i] = mean
            for x in reversed(cycle[1:]):
                eta[x] = mean
                v[x] = w[x] - mean + v[succ[x]]
            for x in cycle:
                state[x] = 2
            path = path[:j]
        for x in reversed(path):
            eta[x] = eta[succ[x]]
            v[x] = w[x] - eta[x] + v[succ[x]]
            state[x] = 2
    return eta, v


def policy_iteration(op: LaxOleinikOperator, policy: np.ndarray, max_rounds: int = 10_000):
    """
    Howard policy iteration for the min-plus eigenproblem of the (unrefined)
    operator: ``v = min_k (cost + v[source]) - eta`` with a single cycle mean
    ``eta`` at the optimum.  ``policy`` holds one candidate column per node.

    Returns ``(eta, v, policy, rounds)``; ``eta`` is an array (constant at
    the optimum because the candidate graph is strongly connected).
    """
    cost, src = op.cost, op.source
    rows = np.arange(cost.shape[0])
    pol = np.asarray(policy, dtype=np.int64).reshape(-1).copy()
    scale = 1e-12 * max(1.0, float(np.max(np.abs(cost))))
    for rounds in range(1, max_rounds + 1):
        eta, v = _evaluate_policy(src[rows, pol], cost[rows, pol])
        eta_c = eta[src]
        k_eta = np.argmin(eta_c, axis=1)
        better = eta_c[rows, k_eta] < eta - scale
        if not np.any(better):
            val = np.where(eta_c <= eta[:, None] + scale, cost + v[src], np.inf)
            k_eta = np.argmin(val, axis=1)
            better = val[rows, k_eta] - eta < v - scale * (1.0 + np.abs(v))
            if not np.any(better):
                return eta, v, pol, rounds
        pol[better] = k_eta[better]
    raise LaxOleinikError(f"policy iteration did not terminate in {max_rounds} rounds")


def sweep_history(op: LaxOleinikOperator, u: np.ndarray, anchor, count: int) -> list:
    """Argmin maps of ``count`` normalised sweeps from ``u``; an exact fixed point repeats its map."""
    Tu, arg = op.step_values(u, strict=False)
    history = [arg]
    w = Tu - Tu[anchor]
    stalled = np.array_equal(w, u - u[anchor])
    while len(history) < count:
        if stalled:
            history.extend([arg] * (count - len(history)))
            break
        Tw, arg = op.step_values(w, strict=False)
        history.append(arg)
        nxt = Tw - Tw[anchor]
        stalled = np.array_equal(nxt, w)
        w = nxt
    return history


def fixed_point_residual(op: LaxOleinikOperator, u: GridFunction, c: float) -> float:
    Tu, _ = op.step_values(u.values, strict=False)
    return float(np.max(np.abs(Tu - u.values + c * op.cfg.tau)))


def solve_weak_kam(
    H: Hamiltonian,
    grid: PeriodicGrid,
    cfg: LaxOleinikConfig | None = None,
    u0: GridFunction | None = None,
    raise_on_failure: bool = False,
) -> WeakKamSolution:
    """
    Anchor-normalised value iteration ``u <- T u - T u(anchor)`` from ``u0 = 0``.

    Stops once ``|T u - u + c tau|`` (equivalently the change of the plain
    update) is at most ``tol * max(1, |c|) * tau``.  The critical
    value is ``-(T u*(anchor) - u*(anchor)) / tau``.  A non-converged run
    returns the last iterate with ``converged=False`` (or raises
    :class:`NotConverged` when ``raise_on_failure``).
    """
    cfg = resolve_config(cfg or LaxOleinikConfig(), H, grid)
    L = Lagrangian(H)
    op = operator_for(L, grid, cfg)
    anchor = grid.wrap_index(cfg.anchor)
    u = np.zeros(grid.shape) if u0 is None else np.array(u0.values, dtype=float)
    u = u - u[anchor]
    drift = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        Tu, _ = op.step_values(u, want_argmin=False)
        shift = Tu[anchor] - u[anchor]
        c = float(-shift / cfg.tau)
        drift.append(c)
        target = Tu - Tu[anchor]
        # N(u) - u equals T u - u + c tau since u(anchor) = 0
        if np.max(np.abs(target - u)) <= cfg.tol * max(1.0, abs(c)) * cfg.tau:
            converged = True
            break
        if cfg.relax is None and it == cfg.plain_iter and cfg.policy_iteration:
            cand = u.reshape(-1)[op.source] + op.cost
            eta, v, _, rounds = policy_iteration(op, np.argmin(cand, axis=1))
            logger.info("policy iteration finished in %d rounds", rounds)
            v = v.reshape(grid.shape)
            u = v - v[anchor]
            continue
        lam = cfg.relax if cfg.relax is not None else (1.0 if it < cfg.plain_iter else 0.5)
        u = target if lam == 1.0 else (1.0 - lam) * u + lam * target
    Tu, _ = op.step_values(u, want_argmin=False)
    c = float(-(Tu[anchor] - u[anchor]) / cfg.tau) + 0.0  # no negative zero
    residual = float(np.max(np.abs(Tu - u + c * cfg.tau)))
    sol = WeakKamSolution(
        u=GridFunction(grid, u),
        c=c,
        residual=residual,
        iterations=it,
        converged=converged,
        tau=cfg.tau,
        config=cfg,
        drift_trace=drift,
        hamiltonian=H,
    )
    if not converged:
        logger.warning("value iteration did not converge in %d iterations", cfg.max_iter)
        if raise_on_failure:
            raise NotConverged(f"no convergence after {cfg.max_iter} iterations", sol)
    return sol


def solve_equivariant(
    H: Hamiltonian, rho, grid: PeriodicGrid, cfg: LaxOleinikConfig | None = None, **kw
) -> WeakKamSolution:
    """rho-equivariant solution on the cover: solve for H shifted by rho downstairs.

    The returned ``u`` is the periodic part; the equivariant function is
    ``rho . x + u(x)`` (see :meth:`WeakKamSolution.equivariant_values`).
    """
    rho = tuple(float(r) for r in np.atleast_1d(np.asarray(rho, dtype=float)))
    sol = solve_weak_kam(shifted(H, rho), grid, cfg, **kw)
    return replace(sol, rho=rho)


def _check_invariance(H: Hamiltonian, k: int, axis: int, tol: float = 1e-9) -> None:
    probe = np.stack(
        np.meshgrid(*[np.arange(97) / 97.0] * H.dim, indexing="ij"), axis=-1
    ).reshape(-1, H.dim)
    shift = np.zeros(H.dim)
    shift[axis] = 1.0 / k
    vs = np.array([[0.0] * H.dim, [1.0] + [0.0] * (H.dim - 1), [-0.7] + [0.4] * (H.dim - 1)])
    for v in vs:
        a = H.lagrangian_values(probe, v)
        b = H.lagrangian_values(probe + shift, v)
        if np.max(np.abs(a - b)) > tol:
            raise NotInvariant(f"Hamiltonian is not invariant under x -> x + 1/{k}")


def solve_invariant(
    H: Hamiltonian,
    k: int,
    grid: PeriodicGrid,
    cfg: LaxOleinikConfig | None = None,
    axis: int = 0,
    **kw,
) -> WeakKamSolution:
    """
    Invariant solution for the cyclic group of translations by ``1/k`` along
    ``axis``: solve on the quotient torus of side ``1/k`` and tile back.
    Only ``axis=0`` in 1D; in 2D the quotient is ``[0,1/k) x [0,1)``, which
    requires a square quotient, so only ``k == 1`` is supported there.
    """
    if k < 1 or grid.n % k:
        raise ValueError(f"k={k} must be a positive divisor of n={grid.n}")
    if k == 1:
        return solve_weak_kam(H, grid, cfg, **kw)
    if grid.dim != 1:
        raise NotImplementedError("non-trivial invariant solves are implemented for d = 1")
    _check_invariance(H, k, axis)
    quotient = PeriodicGrid(grid.dim, grid.n // k, grid.length / k)
    qcfg = cfg or LaxOleinikConfig()
    if qcfg.tau is None:
        # keep the time step of the full problem
        qcfg = replace(qcfg, tau=0.8 * grid.h ** (2.0 / 3.0) * grid.length ** (1.0 / 3.0))
    sol = solve_weak_kam(H, quotient, qcfg, **kw)
    lifted = GridFunction(grid, np.tile(sol.u.values, (k,) * grid.dim))
    period = grid.n // k
    if not np.array_equal(np.roll(lifted.values, period, axis=axis), lifted.values):
        raise AssertionError("lifted solution is not invariant")
    return replace(sol, u=lifted, argmin_maps=[])


def evolve(
    L: Lagrangian,
    u0: GridFunction,
    cfg: LaxOleinikConfig,
    steps: int,
    strict: bool = True,
) -> list[GridFunction]:
    """Un-normalised trajectory ``u0, T u0, T^2 u0, ...`` (``steps + 1`` entries)."""
    op = operator_for(L, u0.grid, cfg)
    out = [u0]
    u = u0.values
    for _ in range(steps):
        u, _ = op.step_values(u, strict)
        out.append(GridFunction(u0.grid, u))
    return out


def backtrack_minimizer(argmin_history, x, grid: PeriodicGrid, length: int | None = None) -> np.ndarray:
    """
    Follow stored argmins backwards from node ``x``.

    ``argmin_history[-1]`` is used for the last step, ``[-2]`` for the one
    before, and so on.  Returns node indices ``(length + 1, dim)`` ordered
    forward in time, ending at ``x``.
    """
    if length is None:
        length = len(argmin_history)
    if length > len(argmin_history):
        raise LaxOleinikError(
            f"history holds {len(argmin_history)} steps, {length} requested"
        )
    node = np.ravel_multi_index(grid.wrap_index(x), grid.shape)
    path = [node]
    for k in range(length):
        amap = np.asarray(argmin_history[-1 - k]).reshape(-1)
        node = int(amap[node])
        path.append(node)
    path = path[::-1]
    return np.stack(np.unravel_index(np.array(path), grid.shape), axis=-1)


def discrete_action(
    L: Lagrangian, path: np.ndarray, grid: PeriodicGrid, tau: float, quadrature: str = "endpoint"
) -> float:
    """Sum of ``tau L(x_k', (x_{k+1} - x_k)/tau)`` along a node path, with
    ``x_k'`` the segment end or midpoint as in the operator."""
    pts = path * grid.h
    disp = grid.periodic_delta(pts[1:], pts[:-1])
    at = pts[1:] - QUADRATURE[quadrature] * disp
    return float(np.sum(tau * L(at, disp / tau)))
