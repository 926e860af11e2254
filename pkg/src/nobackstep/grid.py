"""Uniform 1-D grids, the triangular kernel lattice and trapezoid quadrature."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, GridMismatchError, InvalidFieldError


@dataclass(frozen=True)
class SpatialGrid:
    """Closed uniform grid on [0, 1]; node k sits at x = k*dx."""

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 3:
            raise ConfigurationError(f"n_points must be an integer >= 3, got {self.n_points}")

    @classmethod
    def from_dx(cls, dx: float) -> "SpatialGrid":
        if not (np.isfinite(dx) and dx > 0):
            raise ConfigurationError(f"dx must be positive, got {dx}")
        n = round(1.0 / dx)
        if n < 2 or abs(n * dx - 1.0) > 1e-9:
            raise ConfigurationError(f"dx={dx} does not divide [0, 1] into an integer number of cells")
        return cls(n + 1)

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_points - 1)

    @cached_property
    def x(self) -> np.ndarray:
        x = np.arange(self.n_points) * self.dx
        x[-1] = 1.0
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights over the whole grid."""
        w = np.full(self.n_points, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


@dataclass(frozen=True)
class Field:
    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise InvalidFieldError(
                f"field has shape {v.shape}, grid expects ({self.grid.n_points},)")
        object.__setattr__(self, "values", v)

    def check_finite(self) -> "Field":
        if not np.all(np.isfinite(self.values)):
            raise InvalidFieldError("field contains non-finite values")
        return self


def l2_norm(f: Field) -> float:
    f.check_finite()
    return float(np.sqrt(f.grid.integrate(f.values ** 2)))


def weighted_norm_sq(f: Field, delta: float) -> float:
    """Trapezoid value of int_0^1 exp(delta*x) f(x)^2 dx."""
    f.check_finite()
    if not np.isfinite(delta):
        raise ConfigurationError(f"delta must be finite, got {delta}")
    g = f.grid
    return g.integrate(np.exp(delta * g.x) * f.values ** 2)


@dataclass(frozen=True)
class TriangleGrid:
    """Nodes (x_i, xi_j) with 0 <= j <= i < n_points, stored row by row.

    Row i holds the i+1 nodes xi_0..xi_i at x = x_i, starting at flat
    offset i*(i+1)/2.
    """

    base: SpatialGrid

    @property
    def n_rows(self) -> int:
        return self.base.n_points

    @property
    def size(self) -> int:
        n = self.base.n_points
        return n * (n + 1) // 2

    @property
    def dx(self) -> float:
        return self.base.dx

    def offset(self, i: int) -> int:
        return i * (i + 1) // 2

    def row_slice(self, i: int) -> slice:
        o = self.offset(i)
        return slice(o, o + i + 1)

    @cached_property
    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index of every flat node."""
        i, j = np.tril_indices(self.base.n_points)
        return i, j

    @cached_property
    def points(self) -> np.ndarray:
        """(size, 2) array of (x, xi) coordinates in storage order."""
        i, j = self.index_arrays
        x = self.base.x
        return np.column_stack([x[i], x[j]])

    @cached_property
    def diagonal_index(self) -> np.ndarray:
        i = np.arange(self.n_rows)
        return i * (i + 1) // 2 + i

    @cached_property
    def base_index(self) -> np.ndarray:
        i = np.arange(self.n_rows)
        return i * (i + 1) // 2

    @cached_property
    def inner_weights(self) -> np.ndarray:
        """Trapezoid weights of each node for the inner integral over xi in [0, x_i].

        A row with one node (x = 0) has zero length and contributes nothing.
        """
        i, j = self.index_arrays
        w = np.full(self.size, self.dx)
        w[(j == 0) | (j == i)] = 0.5 * self.dx
        w[self.diagonal_index[0]] = 0.0
        return w

    def dense(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter ragged values into an (n, n) lower-triangular array, out[i, j]."""
        n = self.base.n_points
        out = np.full((n, n), fill, dtype=float)
        out[self.index_arrays] = values
        return out

    def ragged(self, dense: np.ndarray) -> np.ndarray:
        return np.asarray(dense, dtype=float)[self.index_arrays]


@dataclass(frozen=True)
class TriangleKernelGrid:
    grid: TriangleGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise InvalidFieldError(
                f"kernel has {v.shape} values, triangle expects ({self.grid.size},)")
        object.__setattr__(self, "values", v)

    def row(self, i: int) -> np.ndarray:
        return self.values[self.grid.row_slice(i)]

    def last_row(self) -> np.ndarray:
        return self.row(self.grid.n_rows - 1)

    def diagonal(self) -> np.ndarray:
        return self.values[self.grid.diagonal_index]

    def dense(self) -> np.ndarray:
        return self.grid.dense(self.values)

    def __sub__(self, other: "TriangleKernelGrid") -> "TriangleKernelGrid":
        check_same_triangle(self.grid, other.grid)
        return TriangleKernelGrid(self.grid, self.values - other.values)

    def __abs__(self) -> "TriangleKernelGrid":
        return TriangleKernelGrid(self.grid, np.abs(self.values))


def check_same_grid(a: SpatialGrid, b: SpatialGrid) -> None:
    if a.n_points != b.n_points:
        raise GridMismatchError(f"grid mismatch: {a.n_points} vs {b.n_points} nodes")


def check_same_triangle(a: TriangleGrid, b: TriangleGrid) -> None:
    if a.base.n_points != b.base.n_points:
        raise GridMismatchError(
            f"triangle mismatch: {a.base.n_points} vs {b.base.n_points} rows")


def triangle_integral(k: TriangleKernelGrid) -> float:
    """Nested trapezoid value of int_0^1 int_0^x k(x, xi) dxi dx."""
    tri = k.grid
    if not np.all(np.isfinite(k.values)):
        raise InvalidFieldError("kernel contains non-finite values")
    row_integrals = np.add.reduceat(tri.inner_weights * k.values, tri.base_index)
    return tri.base.integrate(row_integrals)
