"""
Mather's alpha function: sweeps over constant cohomology classes,
convexity and superlinearity certificates, the strict critical value, and
a quadrature oracle for one-dimensional mechanical systems.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.optimize import bisect

from .expr import PotentialExpr, parse_potential
from .grid import PeriodicGrid
from .hamiltonian import Hamiltonian, Mechanical, _max_on_torus, estimate_constants, shifted
from .lax_oleinik import (
    LaxOleinikConfig,
    WeakKamSolution,
    solve_equivariant,
    solve_weak_kam,
)

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SpanError(ValueError):
    """The table does not reach far enough in |omega|."""


class BracketError(ValueError):
    """The search bracket does not enclose a minimum."""


@dataclass(frozen=True, eq=False)
class AlphaTable:
    omegas: np.ndarray  # (m, d), lexicographically sorted
    alphas: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    taus: np.ndarray

    @property
    def dim(self) -> int:
        return self.omegas.shape[1]

    def __len__(self) -> int:
        return len(self.alphas)

    def error_bound(self) -> np.ndarray:
        """Per-entry bound ``residual / tau`` on the distance to the discrete critical value."""
        return self.residuals / self.taus

    def lookup(self, omega) -> float:
        w = np.atleast_1d(np.asarray(omega, dtype=float))
        hit = np.flatnonzero(np.all(self.omegas == w, axis=1))
        if not len(hit):
            raise KeyError(tuple(w))
        return float(self.alphas[hit[0]])

    def replace_alpha(self, index: int, value: float) -> "AlphaTable":
        alphas = self.alphas.copy()
        alphas[index] = value
        return AlphaTable(self.omegas, alphas, self.residuals, self.converged, self.taus)

    def to_csv(self, path: str | Path) -> None:
        names = ["omega"] if self.dim == 1 else [f"omega{k + 1}" for k in range(self.dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["alpha", "residual"])
            for om, a, r in zip(self.omegas, self.alphas, self.residuals):
                w.writerow([repr(float(v)) for v in om] + [repr(float(a)), repr(float(r))])

    @classmethod
    def from_csv(cls, path: str | Path, tau: float = 1.0) -> "AlphaTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        d = len(header) - 2
        arr = np.array(rows).reshape(-1, d + 2)
        m = len(arr)
        return _sorted_table(arr[:, :d], arr[:, d], arr[:, d + 1], np.ones(m, bool), np.full(m, tau))


def _sorted_table(omegas, alphas, residuals, converged, taus) -> AlphaTable:
    omegas = np.asarray(omegas, dtype=float)
    order = np.lexsort(omegas.T[::-1])
    return AlphaTable(
        omegas[order],
        np.asarray(alphas, dtype=float)[order],
        np.asarray(residuals, dtype=float)[order],
        np.asarray(converged, dtype=bool)[order],
        np.asarray(taus, dtype=float)[order],
    )


def _class_hamiltonian(H: Hamiltonian, omega: np.ndarray) -> Hamiltonian:
    # the zero class reuses H itself so that alpha(0) and c(H) share one code path
    return H if not np.any(omega) else shifted(H, omega)


def alpha_at(H: Hamiltonian, omega, grid: PeriodicGrid, cfg: LaxOleinikConfig | None = None) -> WeakKamSolution:
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    return solve_weak_kam(_class_hamiltonian(H, w), grid, cfg)


def alpha_sweep(
    H: Hamiltonian,
    omega_list,
    grid: PeriodicGrid,
    cfg: LaxOleinikConfig | None = None,
) -> AlphaTable:
    """alpha(omega) = c(H_omega) for each omega.  Non-converged entries are flagged and kept."""
    omegas = np.array(omega_list, dtype=float).reshape(-1, H.dim)
    if len(omegas) == 0:
        raise ValueError("omega_list is empty")
    if not np.all(np.isfinite(omegas)):
        raise ValueError("omega values must be finite")
    alphas, residuals, conv, taus = [], [], [], []
    for w in omegas:
        sol = alpha_at(H, w, grid, cfg)
        if not sol.converged:
            logger.warning("alpha entry at omega=%s did not converge", w.tolist())
        alphas.append(sol.c)
        residuals.append(sol.residual)
        conv.append(sol.converged)
        taus.append(sol.tau)
    return _sorted_table(omegas, alphas, residuals, conv, taus)


def omega_range(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive arithmetic range; empty when ``start > stop``."""
    if step <= 0:
        raise ValueError("step must be positive")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    if count <= 0:
        return np.zeros(0)
    return np.round(start + step * np.arange(count), 12)


# -- one-dimensional oracle --------------------------------------------------


def _potential_of(V) -> PotentialExpr:
    if isinstance(V, Mechanical):
        V = V.potential
    elif isinstance(V, Hamiltonian):
        raise TypeError("the oracle needs a mechanical Hamiltonian")
    if isinstance(V, str):
        V = parse_potential(V, 1)
    if V.dim != 1:
        raise ValueError("the oracle is one-dimensional")
    return V


def oracle_width(V, c: float) -> float:
    """``W(c) = int_0^1 sqrt(2 (c - V(x))) dx`` for ``c >= max V``."""
    pot = _potential_of(V)
    top = _max_on_torus(pot)
    if c < top - 1e-12:
        raise ValueError(f"W(c) needs c >= max V = {top}")

    def integrand(x):
        return math.sqrt(max(2.0 * (c - float(pot(x))), 0.0))

    val, _ = quad(integrand, 0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
    return float(val)


def alpha_oracle_1d(V, omega: float) -> float:
    """alpha(omega) for ``1/2 p^2 + V(x)`` on the circle by quadrature and bisection."""
    pot = _potential_of(V)
    top = _max_on_torus(pot)
    w = abs(float(np.atleast_1d(omega)[0]))
    if w <= oracle_width(pot, top):
        return top
    # W(c) >= sqrt(2 (c - max V)), so c = max V + w^2/2 brackets the root
    hi = top + 0.5 * w * w
    return float(bisect(lambda c: oracle_width(pot, c) - w, top, hi, xtol=1e-10))


# -- table diagnostics -------------------------------------------------------


@dataclass(frozen=True)
class ConvexityResult:
    passed: bool
    worst_defect: float
    worst_triple: tuple | None


def convexity_check(table: AlphaTable, tol: float) -> ConvexityResult:
    """
    Second differences along collinear triples must be ``>= -tol``.

    One dimension uses consecutive samples (for uneven spacing, twice the gap
    below the chord, which equals the ordinary second difference on a uniform
    grid).  Two dimensions use every triple whose middle point is the
    midpoint of the outer two.
    """
    om, al = table.omegas, table.alphas
    if len(al) < 3:
        raise ValueError("convexity needs at least three samples")
    worst, triple = math.inf, None
    if table.dim == 1:
        w = om[:, 0]
        for i in range(1, len(w) - 1):
            lam = (w[i + 1] - w[i]) / (w[i + 1] - w[i - 1])
            sd = 2.0 * (lam * al[i - 1] + (1 - lam) * al[i + 1] - al[i])
            if sd < worst:
                worst, triple = sd, (float(w[i - 1]), float(w[i]), float(w[i + 1]))
    else:
        index = {tuple(np.round(o, 12)): k for k, o in enumerate(om)}
        for i in range(len(om)):
            for j in range(i + 1, len(om)):
                k = index.get(tuple(np.round(0.5 * (om[i] + om[j]), 12)))
                if k is None:
                    continue
                sd = al[i] - 2 * al[k] + al[j]
                if sd < worst:
                    worst = sd
                    triple = tuple(tuple(float(v) for v in om[m]) for m in (i, k, j))
    if triple is None:
        raise ValueError("no collinear triples in the table")
    return ConvexityResult(bool(worst >= -tol), float(worst), triple)


@dataclass(frozen=True)
class SuperlinearityResult:
    passed: bool
    B: dict  # K -> max over the table of K|omega| - alpha
    ratio: float  # alpha / |omega| at the largest sampled |omega|
    A: dict = field(default_factory=dict)  # K -> sup of L on |v| <= K, when a Hamiltonian is given


def superlinearity_check(table: AlphaTable, K_list, H: Hamiltonian | None = None) -> SuperlinearityResult:
    """
    For each K report ``B(K) = max(K|omega| - alpha)``; pass iff every B(K)
    is finite and ``alpha/|omega|`` at the largest sampled |omega| exceeds
    every K.  With ``H`` given, ``A(K)`` is attached as the a priori bound
    ``alpha(omega) >= K|omega| - A(K)``.
    """
    K_list = [float(k) for k in K_list]
    norms = np.linalg.norm(table.omegas, axis=1)
    span = float(norms.max())
    if span < max(K_list) + 1:
        raise SpanError(f"table reaches |omega| = {span:g}, need at least {max(K_list) + 1:g}")
    B = {k: float(np.max(k * norms - table.alphas)) for k in K_list}
    top = int(np.argmax(norms))
    ratio = float(table.alphas[top] / norms[top])
    A = {}
    if H is not None:
        consts = estimate_constants(H, R_list=tuple(K_list), K_list=(0,))
        A = {k: consts.A(k) for k in K_list}
    ok = all(math.isfinite(b) for b in B.values()) and all(ratio > k for k in K_list)
    return SuperlinearityResult(ok, B, ratio, A)


@dataclass(frozen=True)
class FlatPiece:
    level: float
    boundary: float  # mean of the two one-sided estimates
    lower: float  # negative side, reported as a magnitude
    upper: float


def _side_boundary(w: np.ndarray, a: np.ndarray, level: float, flat_tol: float) -> float:
    """Boundary on the side of increasing w >= 0, from the first two samples above the level."""
    flat = a <= level + flat_tol
    if not flat[0]:
        raise ValueError("no flat sample at the origin side")
    tail = np.flatnonzero(~flat)
    if len(tail) < 2:
        raise SpanError("need two samples beyond the flat piece")
    i, j = tail[0], tail[1]
    last_flat = w[i - 1]
    # alpha is convex, so the secant root over-estimates the boundary
    root = w[i] - (a[i] - level) * (w[j] - w[i]) / (a[j] - a[i])
    return float(min(max(root, last_flat), w[i]))


def flat_piece(table: AlphaTable, level: float, flat_tol: float = 1e-6) -> FlatPiece:
    """Locate where a one-dimensional table leaves the level ``level`` on both sides."""
    if table.dim != 1:
        raise ValueError("flat_piece handles one-dimensional tables")
    w, a = table.omegas[:, 0], table.alphas
    pos = w >= 0
    neg = w <= 0
    upper = _side_boundary(w[pos], a[pos], level, flat_tol)
    lower = _side_boundary(-w[neg][::-1], a[neg][::-1], level, flat_tol)
    return FlatPiece(level, 0.5 * (upper + lower), lower, upper)


# -- strict critical value ----------------------------------------------------


@dataclass
class StrictCriticalResult:
    c_strict: float
    argmin_omega: list
    c_of_lift: float
    evaluations: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _golden(f, lo: float, hi: float, tol: float) -> None:
    """Golden-section search; values are recorded by ``f`` itself."""
    a, b = lo, hi
    x1, x2 = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)


def strict_critical(
    H: Hamiltonian,
    grid: PeriodicGrid,
    cfg: LaxOleinikConfig | None = None,
    bracket: tuple[float, float] = (-2.0, 2.0),
    tol: float = 1e-2,
    rounds: int = 2,
) -> StrictCriticalResult:
    """
    Minimise omega -> alpha(omega) by golden sections (coordinate descent
    in two dimensions) over ``bracket`` on every axis.  ``c_strict`` is the
    smallest alpha evaluated; ``c_of_lift`` re-solves the equivariant
    problem at the minimiser.
    """
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise BracketError("bracket must satisfy lo < hi")
    d = H.dim
    cache: dict = {}

    def alpha(w) -> float:
        key = tuple(float(v) for v in w)
        if key not in cache:
            cache[key] = alpha_at(H, np.array(key), grid, cfg).c
        return cache[key]

    point = np.zeros(d)
    point[:] = 0.5 * (lo + hi)
    for axis in range(d):
        probe = [point.copy() for _ in range(3)]
        probe[0][axis], probe[2][axis] = lo, hi
        a0, am, a1 = (alpha(p) for p in probe)
        if am > min(a0, a1):
            raise BracketError(
                f"alpha is monotone across the bracket on axis {axis} "
                f"({a0:.6g}, {am:.6g}, {a1:.6g})"
            )
    for _ in range(rounds if d > 1 else 1):
        before = min(cache.values())
        for axis in range(d):
            def along(s, axis=axis):
                w = point.copy()
                w[axis] = s
                return alpha(w)

            _golden(along, lo, hi, tol)
            best = min((v, k) for k, v in cache.items() if all(
                k[j] == point[j] for j in range(d) if j != axis))
            point[axis] = best[1][axis]
        if min(cache.values()) >= before:
            break
    # ties on a flat piece go to the class of smallest norm
    c_strict, _, arg = min((v, float(np.linalg.norm(k)), k) for k, v in cache.items())
    lift = solve_equivariant(H, np.array(arg), grid, cfg) if np.any(arg) else solve_weak_kam(H, grid, cfg)
    return StrictCriticalResult(float(c_strict), [float(v) for v in arg], float(lift.c), len(cache))
