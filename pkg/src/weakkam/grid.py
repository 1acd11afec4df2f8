"""
Periodic grids on the flat torus, grid functions, discrete derivatives and
mollification.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid with ``n`` nodes per axis on a torus of side ``length``.

    ``length`` defaults to 1; quotient problems use ``1/k``.
    """

    dim: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8:
            raise ValueError(f"need at least 8 nodes per axis, got {self.n}")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``; node 0 sits at the origin."""
        axes = [np.arange(self.n) * self.h] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def wrap_index(self, index) -> tuple[int, ...]:
        idx = np.atleast_1d(np.asarray(index, dtype=int))
        if idx.size == 1 and self.dim > 1:
            idx = np.repeat(idx, self.dim)
        return tuple(int(i) % self.n for i in idx)

    def periodic_delta(self, a, b) -> np.ndarray:
        """Minimal representative of ``a - b`` modulo the period."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        return d - self.length * np.round(d / self.length)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "n": self.n, "length": self.length}


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: PeriodicGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)  # private copy
        if vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, grid: PeriodicGrid, fun) -> "GridFunction":
        """Sample ``fun`` on the nodes; ``fun`` receives ``(..., dim)`` coordinates."""
        return cls(grid, fun(grid.coords()))

    @classmethod
    def constant(cls, grid: PeriodicGrid, value: float = 0.0) -> "GridFunction":
        return cls(grid, np.full(grid.shape, float(value)))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def at(self, index) -> float:
        return float(self.values[self.grid.wrap_index(index)])

    def normalized(self, anchor=0) -> "GridFunction":
        return GridFunction(self.grid, self.values - self.at(anchor))

    def __add__(self, other):
        if isinstance(other, GridFunction):
            return GridFunction(self.grid, self.values + other.values)
        return GridFunction(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            return GridFunction(self.grid, self.values - other.values)
        return GridFunction(self.grid, self.values - other)

    def __eq__(self, other):
        return (
            isinstance(other, GridFunction)
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {"grid": self.grid.to_dict(), "values": [float(v) for v in self.values.ravel()]}
        )

    @classmethod
    def from_json(cls, text: str) -> "GridFunction":
        data = json.loads(text)
        return cls(PeriodicGrid(**data["grid"]), np.array(data["values"], dtype=float))

    def to_csv(self, path: str | Path) -> None:
        """Columns ``i[,j], x[,y], value``; floats written with ``repr`` for exact round trips."""
        g = self.grid
        coords = g.coords().reshape(-1, g.dim)
        index = np.indices(g.shape).reshape(g.dim, -1).T
        names = ["i", "j"][: g.dim] + ["x", "y"][: g.dim] + ["value"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for idx, xy, val in zip(index, coords, self.values.ravel()):
                w.writerow([int(k) for k in idx] + [repr(float(c)) for c in xy] + [repr(float(val))])

    @classmethod
    def from_csv(cls, path: str | Path, length: float = 1.0) -> "GridFunction":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
        dim = 1 if header[:2] == ["i", "x"] else 2
        n = round(len(rows) ** (1.0 / dim))
        grid = PeriodicGrid(dim, n, length)
        vals = np.empty(grid.shape)
        for row in rows:
            idx = tuple(int(k) for k in row[:dim])
            vals[idx] = float(row[-1])
        return cls(grid, vals)


def interpolate(f: GridFunction, x) -> np.ndarray | float:
    """Multilinear periodic interpolation; ``x`` has shape ``(..., dim)``."""
    g = f.grid
    x = np.asarray(x, dtype=float)
    scalar = False
    if g.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        scalar = x.ndim == 0
        x = x[..., None]
    t = np.mod(x, g.length) / g.h
    # snap coordinates that are nodes up to rounding, so nodes reproduce exactly
    near = np.rint(t)
    t = np.where(np.abs(t - near) < 1e-9, near, t)
    i0 = np.floor(t).astype(int)
    w1 = t - i0
    out = 0.0
    for corner in np.ndindex(*(2,) * g.dim):
        idx, w = [], 1.0
        for axis, bit in enumerate(corner):
            idx.append(np.mod(i0[..., axis] + bit, g.n))
            w = w * (w1[..., axis] if bit else 1.0 - w1[..., axis])
        out = out + w * f.values[tuple(idx)]
    return float(out) if scalar else out


def gradient_centered(f: GridFunction) -> np.ndarray:
    """Centered differences with periodic wrap; shape ``shape + (dim,)``."""
    g = f.grid
    parts = [
        (np.roll(f.values, -1, axis=a) - np.roll(f.values, 1, axis=a)) / (2 * g.h)
        for a in range(g.dim)
    ]
    return np.stack(parts, axis=-1)


def one_sided_differences(f: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward differences, each of shape ``shape + (dim,)``."""
    g = f.grid
    fwd = [(np.roll(f.values, -1, axis=a) - f.values) / g.h for a in range(g.dim)]
    bwd = [(f.values - np.roll(f.values, 1, axis=a)) / g.h for a in range(g.dim)]
    return np.stack(fwd, axis=-1), np.stack(bwd, axis=-1)


def lipschitz_constant(f: GridFunction) -> float:
    """Largest absolute difference quotient between axis-adjacent nodes."""
    fwd, _ = one_sided_differences(f)
    return float(np.max(np.abs(fwd)))


def kink_mask(f: GridFunction, threshold: float | None = None) -> np.ndarray:
    """
    Nodes where forward and backward differences disagree by more than
    ``threshold`` (default ``10 h max(Lip, 1)``), together with their axis
    neighbours.
    """
    g = f.grid
    if threshold is None:
        threshold = 10 * g.h * max(lipschitz_constant(f), 1.0)
    fwd, bwd = one_sided_differences(f)
    raw = np.any(np.abs(fwd - bwd) > threshold, axis=-1)
    mask = raw.copy()
    for a in range(g.dim):
        mask |= np.roll(raw, 1, axis=a) | np.roll(raw, -1, axis=a)
    return mask


@dataclass(frozen=True, eq=False)
class MollifierKernel:
    """Discrete bump ``exp(-1 / (1 - (|y|/delta)^2))`` renormalised to unit mass."""

    delta: float
    h: float
    dim: int
    offsets: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def radius_cells(self) -> int:
        return int(np.max(np.abs(self.offsets))) if len(self.offsets) else 0


def mollifier_kernel(delta: float, grid: PeriodicGrid) -> MollifierKernel:
    h = grid.h
    r = int(np.floor(delta / h))
    if r < 1:
        raise ValueError(f"kernel radius {delta} is under one grid cell ({h})")
    ax = np.arange(-r, r + 1)
    offs = np.stack(np.meshgrid(*[ax] * grid.dim, indexing="ij"), axis=-1).reshape(-1, grid.dim)
    s = np.linalg.norm(offs * h, axis=1) / delta
    keep = s < 1.0
    offs, s = offs[keep], s[keep]
    w = np.exp(-1.0 / (1.0 - s**2))
    w = w / w.sum()
    return MollifierKernel(float(delta), h, grid.dim, offs, w)


def mollify(f: GridFunction, kernel: MollifierKernel) -> GridFunction:
    """Periodic discrete convolution ``sum_j w_j f(x - y_j)``."""
    g = f.grid
    if kernel.delta >= g.length / 4:
        raise ValueError("kernel support must stay below a quarter period")
    if not np.isclose(kernel.h, g.h):
        raise ValueError("kernel was built for a different grid spacing")
    out = np.zeros(g.shape)
    for off, w in zip(kernel.offsets, kernel.weights):
        out += w * np.roll(f.values, tuple(int(o) for o in off), axis=tuple(range(g.dim)))
    return GridFunction(g, out)
