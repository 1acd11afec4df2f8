"""
Tonelli Hamiltonians on the flat torus, their Lagrangians and the uniform
constants A(R), C(K), A*(R), C*(K).

Points and vectors are arrays whose last axis has length ``dim``.  For
``dim == 1`` scalars and flat arrays of points are accepted as well.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import PotentialExpr, parse_potential


class HamiltonianError(ValueError):
    pass


class MomentumOutOfRange(HamiltonianError):
    """A momentum (or Legendre maximiser) left the tabulated box."""


def as_points(a, dim: int) -> np.ndarray:
    """Coerce to shape ``(..., dim)``."""
    a = np.asarray(a, dtype=float)
    if dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        a = a[..., None]
    if a.shape[-1] != dim:
        raise ValueError(f"expected last axis of length {dim}, got shape {a.shape}")
    return a


class Hamiltonian:
    """Common interface; concrete kinds are the dataclasses below."""

    dim: int

    def __call__(self, x, p) -> np.ndarray:
        raise NotImplementedError

    def dH_dp(self, x, p) -> np.ndarray:
        raise NotImplementedError

    def dH_dx(self, x, p) -> np.ndarray:
        raise NotImplementedError

    def lagrangian_values(self, x, v) -> np.ndarray:
        raise NotImplementedError

    def momentum_of(self, x, v) -> np.ndarray:
        raise NotImplementedError

    def max_potential(self) -> float:
        """``sup_x H(x, 0)``; equals ``max V`` for mechanical specs."""
        raise NotImplementedError

    def lagrangian_grad(self, x, v, eps: float = 1e-6):
        """``(dL/dx, dL/dv)``; central differences unless a kind knows better."""
        x, v = as_points(x, self.dim), as_points(v, self.dim)
        shape = np.broadcast_shapes(x.shape, v.shape)
        gx, gv = np.empty(shape), np.empty(shape)
        L = self.lagrangian_values
        for a in range(self.dim):
            e = np.zeros(self.dim)
            e[a] = eps
            gx[..., a] = (L(x + e, v) - L(x - e, v)) / (2 * eps)
            gv[..., a] = (L(x, v + e) - L(x, v - e)) / (2 * eps)
        return gx, gv


@dataclass(frozen=True)
class Mechanical(Hamiltonian):
    """``H(x, p) = |p|^2 / 2 + V(x)``."""

    potential: PotentialExpr

    @property
    def dim(self) -> int:
        return self.potential.dim

    def __call__(self, x, p):
        x, p = as_points(x, self.dim), as_points(p, self.dim)
        return 0.5 * np.sum(p * p, axis=-1) + self.potential(x)

    def dH_dp(self, x, p):
        x, p = as_points(x, self.dim), as_points(p, self.dim)
        return np.broadcast_to(p, np.broadcast_shapes(x.shape, p.shape)).copy()

    def dH_dx(self, x, p):
        x, p = as_points(x, self.dim), as_points(p, self.dim)
        g = self.potential.gradient(x)
        return np.broadcast_to(g, np.broadcast_shapes(x.shape, p.shape)).copy()

    def lagrangian_values(self, x, v):
        x, v = as_points(x, self.dim), as_points(v, self.dim)
        return 0.5 * np.sum(v * v, axis=-1) - self.potential(x)

    def momentum_of(self, x, v):
        x, v = as_points(x, self.dim), as_points(v, self.dim)
        return np.broadcast_to(v, np.broadcast_shapes(x.shape, v.shape)).copy()

    def max_potential(self) -> float:
        return _max_on_torus(self.potential)

    def lagrangian_grad(self, x, v, eps: float = 1e-6):
        x, v = as_points(x, self.dim), as_points(v, self.dim)
        shape = np.broadcast_shapes(x.shape, v.shape)
        return (
            np.broadcast_to(-self.potential.gradient(x), shape).copy(),
            np.broadcast_to(v, shape).copy(),
        )


@dataclass(frozen=True)
class Shifted(Hamiltonian):
    """``H_omega(x, p) = base(x, p + omega)`` for a constant 1-form omega."""

    base: Hamiltonian
    omega: tuple

    @property
    def dim(self) -> int:
        return self.base.dim

    def _w(self):
        return np.asarray(self.omega, dtype=float)

    def __call__(self, x, p):
        return self.base(x, as_points(p, self.dim) + self._w())

    def dH_dp(self, x, p):
        return self.base.dH_dp(x, as_points(p, self.dim) + self._w())

    def dH_dx(self, x, p):
        return self.base.dH_dx(x, as_points(p, self.dim) + self._w())

    def lagrangian_values(self, x, v):
        # conjugate of p -> base(x, p + w) is v -> L_base(x, v) - <w, v>
        v = as_points(v, self.dim)
        return self.base.lagrangian_values(x, v) - v @ self._w()

    def momentum_of(self, x, v):
        return self.base.momentum_of(x, v) - self._w()

    def lagrangian_grad(self, x, v, eps: float = 1e-6):
        gx, gv = self.base.lagrangian_grad(x, v, eps)
        return gx, gv - self._w()

    def max_potential(self) -> float:
        return float(np.max(-self.lagrangian_values(_probe_points(self.dim), 0.0)))


@dataclass(frozen=True, eq=False)
class Tabulated(Hamiltonian):
    """
    Hamiltonian sampled on a periodic x grid times a momentum box.

    ``values`` has shape ``(nx,) * dim + (np_1, ..., np_dim)``.  H is
    interpolated multilinearly: periodically in x, and inside the box in p.
    """

    x_grid: tuple  # one increasing array per axis, covering [0, 1)
    p_grid: tuple  # one uniform increasing array per axis
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise HamiltonianError("tabulated values must be finite")
        d = len(self.x_grid)
        for axis in range(d):
            second = np.diff(vals, n=2, axis=d + axis)
            if second.size and np.min(second) <= 0:
                raise HamiltonianError(
                    f"tabulated H is not strictly convex along momentum axis {axis}"
                )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return len(self.x_grid)

    @property
    def p_step(self) -> np.ndarray:
        return np.array([g[1] - g[0] for g in self.p_grid])

    def _x_weights(self, x):
        """Periodic linear weights: list over axes of (i0, i1, w1)."""
        out = []
        for axis, g in enumerate(self.x_grid):
            g = np.asarray(g)
            n = len(g)
            xf = np.mod(x[..., axis], 1.0)
            i0 = np.searchsorted(g, xf, side="right") - 1
            i0 = np.mod(i0, n)
            x0 = g[i0]
            i1 = np.mod(i0 + 1, n)
            x1 = np.where(i1 == 0, g[0] + 1.0, g[i1])
            w1 = np.mod(xf - x0, 1.0) / (x1 - x0)
            out.append((i0, i1, w1))
        return out

    def _p_weights(self, p):
        out = []
        for axis, g in enumerate(self.p_grid):
            g = np.asarray(g)
            pa = p[..., axis]
            if np.any(pa < g[0] - 1e-12) or np.any(pa > g[-1] + 1e-12):
                raise MomentumOutOfRange(
                    f"momentum outside tabulated box [{g[0]}, {g[-1]}] on axis {axis}"
                )
            t = (pa - g[0]) / (g[1] - g[0])
            i0 = np.clip(np.floor(t).astype(int), 0, len(g) - 2)
            out.append((i0, i0 + 1, t - i0))
        return out

    def x_slice(self, x) -> np.ndarray:
        """H(x, .) on the full momentum grid, shape ``x.shape[:-1] + p_shape``."""
        x = as_points(x, self.dim)
        d = self.dim
        acc = 0.0
        weights = self._x_weights(x)
        for corner in np.ndindex(*(2,) * d):
            idx, w = [], 1.0
            for axis, bit in enumerate(corner):
                i0, i1, w1 = weights[axis]
                idx.append(i1 if bit else i0)
                w = w * (w1 if bit else 1.0 - w1)
            w = np.asarray(w)[(...,) + (None,) * d]
            acc = acc + w * self.values[tuple(idx)]
        return acc

    def __call__(self, x, p):
        x, p = as_points(x, self.dim), as_points(p, self.dim)
        shape = np.broadcast_shapes(x.shape, p.shape)
        x, p = np.broadcast_to(x, shape), np.broadcast_to(p, shape)
        d = self.dim
        xw, pw = self._x_weights(x), self._p_weights(p)
        acc = np.zeros(shape[:-1])
        for corner in np.ndindex(*(2,) * (2 * d)):
            idx, w = [], 1.0
            for axis in range(d):
                i0, i1, w1 = xw[axis]
                bit = corner[axis]
                idx.append(i1 if bit else i0)
                w = w * (w1 if bit else 1.0 - w1)
            for axis in range(d):
                i0, i1, w1 = pw[axis]
                bit = corner[d + axis]
                idx.append(i1 if bit else i0)
                w = w * (w1 if bit else 1.0 - w1)
            acc = acc + w * self.values[tuple(idx)]
        return acc

    def _fd(self, f, x, p, axis, wrt_p):
        x, p = as_points(x, self.dim), as_points(p, self.dim)
        if wrt_p:
            e = np.zeros(self.dim)
            e[axis] = 0.5 * self.p_step[axis]
            return (f(x, p + e) - f(x, p - e)) / (2 * e[axis])
        e = np.zeros(self.dim)
        e[axis] = 0.5 * (self.x_grid[axis][1] - self.x_grid[axis][0])
        return (f(x + e, p) - f(x - e, p)) / (2 * e[axis])

    def dH_dp(self, x, p):
        return np.stack([self._fd(self, x, p, a, True) for a in range(self.dim)], axis=-1)

    def dH_dx(self, x, p):
        return np.stack([self._fd(self, x, p, a, False) for a in range(self.dim)], axis=-1)

    def _conjugate(self, x, v):
        """Brute-force max over the momentum grid with parabolic refinement."""
        x, v = as_points(x, self.dim), as_points(v, self.dim)
        shape = np.broadcast_shapes(x.shape, v.shape)
        x, v = np.broadcast_to(x, shape), np.broadcast_to(v, shape)
        d = self.dim
        hx = self.x_slice(x)  # (..., *p_shape)
        pg = np.meshgrid(*[np.asarray(g) for g in self.p_grid], indexing="ij")
        pv = sum(v[(...,) + (a,) + (None,) * d] * pg[a] for a in range(d))
        obj = pv - hx
        flat = obj.reshape(obj.shape[: obj.ndim - d] + (-1,))
        best = np.argmax(flat, axis=-1)
        p_shape = tuple(len(g) for g in self.p_grid)
        multi = np.unravel_index(best, p_shape)
        for a in range(d):
            if np.any(multi[a] == 0) or np.any(multi[a] == p_shape[a] - 1):
                raise MomentumOutOfRange(
                    "Legendre maximiser on the boundary of the momentum box; enlarge the table"
                )
        value = np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]
        p_star = np.empty(shape)
        lead = np.indices(best.shape)
        # independent 3-point parabolic refinement along each momentum axis
        for a in range(d):
            step = self.p_step[a]
            taps = []
            for off in (-1, 0, 1):
                idx = list(multi)
                idx[a] = multi[a] + off
                taps.append(obj[tuple(lead) + tuple(idx)])
            fm, f0, fp = taps
            curv = 0.5 * (fm - 2 * f0 + fp)
            slope = 0.5 * (fp - fm)
            safe = np.where(curv < 0, curv, -1.0)
            shift = np.where(curv < 0, np.clip(-slope / (2 * safe), -0.5, 0.5), 0.0)
            value = value + slope * shift + curv * shift**2
            p_star[..., a] = np.asarray(self.p_grid[a])[multi[a]] + shift * step
        return value, p_star

    def lagrangian_values(self, x, v):
        return self._conjugate(x, v)[0]

    def momentum_of(self, x, v):
        return self._conjugate(x, v)[1]

    def max_potential(self) -> float:
        return float(np.max(-self.lagrangian_values(_probe_points(self.dim), 0.0)))


def _probe_points(dim: int, n: int = 64) -> np.ndarray:
    axes = [np.arange(n) / n] * dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)


def _max_on_torus(potential: PotentialExpr, n: int = 2048) -> float:
    """Dense sampling followed by a local bounded refinement."""
    from scipy.optimize import minimize

    dim = potential.dim
    n = n if dim == 1 else 256
    pts = _probe_points(dim, n)
    vals = potential(pts)
    k = int(np.argmax(vals))
    h = 1.0 / n
    x0 = pts[k]
    res = minimize(
        lambda z: -float(potential(z)),
        x0,
        bounds=[(c - h, c + h) for c in x0],
        method="L-BFGS-B",
        options={"ftol": 1e-15, "gtol": 1e-12},
    )
    return float(max(vals[k], -res.fun))


def mechanical(potential: str | PotentialExpr, dim: int = 1) -> Mechanical:
    if isinstance(potential, str):
        potential = parse_potential(potential, dim)
    return Mechanical(potential)


def shifted(spec: Hamiltonian, omega) -> Shifted:
    """``H_omega``.  Nested shifts collapse into a single one."""
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    if w.shape != (spec.dim,):
        raise ValueError(f"omega must have length {spec.dim}")
    if isinstance(spec, Shifted):
        return Shifted(spec.base, tuple(float(a) for a in np.asarray(spec.omega) + w))
    return Shifted(spec, tuple(float(a) for a in w))


def eval_H(spec: Hamiltonian, x, p) -> float | np.ndarray:
    out = spec(x, p)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Lagrangian:
    """Fiberwise Legendre conjugate of a Hamiltonian."""

    hamiltonian: Hamiltonian

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    def __call__(self, x, v) -> np.ndarray:
        return self.hamiltonian.lagrangian_values(x, v)


def lagrangian(spec: Hamiltonian) -> Lagrangian:
    return Lagrangian(spec)


def legendre_point(spec: Hamiltonian, x, v) -> tuple[float, np.ndarray]:
    """Value of ``L(x, v) = max_p <p, v> - H(x, p)`` and the maximising momentum."""
    value = spec.lagrangian_values(x, v)
    p_star = spec.momentum_of(x, v)
    if np.ndim(value) == 0:
        return float(value), np.asarray(p_star).reshape(spec.dim)
    return value, p_star


def conjugate_numeric(fun, x, p, v_radius: float, n: int = 4001) -> np.ndarray:
    """
    Brute-force ``max_v <p, v> - fun(x, v)`` over a 1D velocity grid with
    parabolic refinement.  Used to check the double conjugate.
    """
    vs = np.linspace(-v_radius, v_radius, n)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    obj = p[:, None] * vs[None, :] - fun(x[:, None, None], vs[None, :, None])
    k = np.clip(np.argmax(obj, axis=1), 1, n - 2)
    rows = np.arange(len(p))
    fm, f0, fp = obj[rows, k - 1], obj[rows, k], obj[rows, k + 1]
    denom = fm - 2 * f0 + fp
    return f0 - 0.125 * (fm - fp) ** 2 / np.where(denom < 0, denom, -np.inf)


@dataclass(frozen=True)
class TonelliConstants:
    """Sampled uniform constants; call the maps as ``A(R)``, ``C(K)`` etc."""

    A_table: dict
    C_table: dict
    A_star_table: dict
    C_star_table: dict

    def A(self, R: float) -> float:
        return self.A_table[float(R)]

    def C(self, K: float) -> float:
        return self.C_table[float(K)]

    def A_star(self, R: float) -> float:
        return self.A_star_table[float(R)]

    def C_star(self, K: float) -> float:
        return self.C_star_table[float(K)]

    def theta(self, c: float) -> float:
        return c + self.A(1.0)

    def K_loc(self, c: float, t: float) -> float:
        return t * (self.A(0.0) + self.C(self.theta(c) + 1.0))

    @property
    def sym_lip(self) -> float:
        return self.C(1.0) + self.A(1.0)


def _ball(dim: int, radius: float, density: int) -> np.ndarray:
    """Regular samples of the closed ball, including the sphere of radius R."""
    if dim == 1:
        return np.linspace(-radius, radius, 2 * density + 1)[:, None]
    ax = np.linspace(-radius, radius, 2 * density + 1)
    g = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    g = g[np.linalg.norm(g, axis=1) <= radius * (1 + 1e-12)]
    ang = np.linspace(0, 2 * np.pi, 8 * density, endpoint=False)
    rim = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.concatenate([g, rim])


def _sup_over(f, xs, vs) -> float:
    vals = f(xs[:, None, :], vs[None, :, :])
    if not np.all(np.isfinite(vals)):
        raise HamiltonianError("non-finite value while sampling constants")
    return float(np.max(vals))


def _shift_norm(spec: Hamiltonian) -> float:
    if isinstance(spec, Shifted):
        return float(np.linalg.norm(spec.omega)) + _shift_norm(spec.base)
    return 0.0


def estimate_constants(
    spec: Hamiltonian,
    R_list=(0.0, 1.0),
    K_list=(0.0, 1.0),
    sample_density: int = 32,
) -> TonelliConstants:
    """
    Estimate A(R), C(K), A*(R), C*(K) by sampling.

    C(K) is the larger of the sampled ``max K|v| - L`` over a velocity
    window of radius ``2(K + |omega|) + 2`` and ``A*(K)``; the two agree
    in exact arithmetic, so the maximum only removes sampling bias.
    Symmetrically C*(K) = max(sampled max K|p| - H, A(K)).
    """
    if sample_density < 16:
        raise ValueError("sample_density must be at least 16 per axis")
    d = spec.dim
    xs = _probe_points(d, sample_density if d == 2 else 4 * sample_density)
    L = spec.lagrangian_values
    need_R = sorted({float(r) for r in R_list} | {float(k) for k in K_list} | {0.0, 1.0})
    A = {R: _sup_over(L, xs, _ball(d, R, sample_density)) for R in need_R}
    A_star = {R: _sup_over(spec, xs, _ball(d, R, sample_density)) for R in need_R}
    s = _shift_norm(spec)
    C, C_star = {}, {}
    for K in sorted({float(k) for k in K_list} | {0.0, 1.0}):
        if isinstance(spec, Tabulated):
            # sup_v K|v| - L = sup_{|p|<=K} H exactly; velocity windows would leave the box
            C[K] = A_star[K]
            C_star[K] = A[K]
            continue
        radius = 2.0 * (K + s) + 2.0
        ball = _ball(d, radius, (8 if d == 1 else 2) * sample_density)
        xs_c = xs if d == 1 else _probe_points(d, 16)
        tight = _sup_over(lambda x, v: K * np.linalg.norm(v, axis=-1) - L(x, v), xs_c, ball)
        C[K] = max(tight, A_star[K])
        tight = _sup_over(lambda x, p: K * np.linalg.norm(p, axis=-1) - spec(x, p), xs_c, ball)
        C_star[K] = max(tight, A[K])
    return TonelliConstants(A, C, A_star, C_star)


def critical_upper_bound(consts: TonelliConstants) -> float:
    """Constants are 0-Lipschitz, so c(H) <= C(0)."""
    return consts.C(0.0)


def default_v_max(consts: TonelliConstants, c: float | None = None) -> float:
    """Minimiser locality radius per unit time: A(0) + C(theta + 1)."""
    if c is None:
        c = critical_upper_bound(consts)
    K = consts.theta(c) + 1.0
    if float(K) not in consts.C_table:
        raise KeyError(f"C({K}) not estimated; include it in K_list")
    return consts.A(0.0) + consts.C(K)


@functools.lru_cache(maxsize=256)
def locality_constants(spec: Hamiltonian, sample_density: int = 32) -> TonelliConstants:
    """Estimate everything needed for the default search window in one pass."""
    base = estimate_constants(spec, (0.0, 1.0), (0.0, 1.0), sample_density)
    theta_plus = base.C(0.0) + base.A(1.0) + 1.0
    return estimate_constants(spec, (0.0, 1.0), (0.0, 1.0, theta_plus), sample_density)


# --- CSV tables ---------------------------------------------------------------

def load_tabulated(path: str | Path) -> Tabulated:
    """Read ``x[,y],p1[,p2],H`` rows (row-major, strictly increasing coordinates)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = np.array([[float(c) for c in row] for row in reader if row])
    if header not in (["x", "p1", "H"], ["x", "y", "p1", "p2", "H"]):
        raise HamiltonianError(f"unexpected table header {header}")
    d = 1 if len(header) == 3 else 2
    coords = [np.unique(rows[:, k]) for k in range(2 * d)]
    shape = tuple(len(c) for c in coords)
    if rows.shape[0] != int(np.prod(shape)):
        raise HamiltonianError("table is not a full tensor grid")
    expected = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(-1, 2 * d)
    if not np.array_equal(expected, rows[:, : 2 * d]):
        raise HamiltonianError("table rows are not in row-major order of increasing coordinates")
    for c in coords[d:]:
        if not np.allclose(np.diff(c), c[1] - c[0]):
            raise HamiltonianError("momentum grid must be uniform")
    return Tabulated(tuple(coords[:d]), tuple(coords[d:]), rows[:, -1].reshape(shape))


def save_tabulated(spec: Tabulated, path: str | Path) -> None:
    d = spec.dim
    header = ["x", "p1", "H"] if d == 1 else ["x", "y", "p1", "p2", "H"]
    coords = list(spec.x_grid) + list(spec.p_grid)
    grid = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(-1, 2 * d)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, val in zip(grid, spec.values.reshape(-1)):
            w.writerow([repr(float(a)) for a in row] + [repr(float(val))])


def tabulate(fun, dim: int, nx: int, p_lim: float, n_p: int) -> Tabulated:
    """Sample ``fun(x, p)`` (vectorised, last axis = dim) into a table."""
    xg = tuple(np.arange(nx) / nx for _ in range(dim))
    pg = tuple(np.linspace(-p_lim, p_lim, n_p) for _ in range(dim))
    X = np.stack(np.meshgrid(*xg, indexing="ij"), axis=-1)
    P = np.stack(np.meshgrid(*pg, indexing="ij"), axis=-1)
    xs = X.reshape((nx,) * dim + (1,) * dim + (dim,))
    ps = P.reshape((1,) * dim + (n_p,) * dim + (dim,))
    return Tabulated(xg, pg, np.asarray(fun(xs, ps), dtype=float))
