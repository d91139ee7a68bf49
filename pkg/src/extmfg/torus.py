"""Uniform periodic grids on [0, 1)^d and their finite-difference calculus.

Scalar fields are flat arrays of shape ``(N,)`` in row-major node order and
vector fields are arrays of shape ``(N, d)``.  The discrete Fokker-Planck
operator is defined as the exact transpose of the HJB transport operator, so
that discrete integration by parts holds to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import GridMismatchError

__all__ = [
    "TorusGrid",
    "gradient",
    "laplacian",
    "hessian",
    "transport_operator",
    "fp_operator",
    "integrate",
    "integrate_against",
    "pairing",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform lattice with ``n`` points per axis on the unit torus."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if int(self.n) != self.n or self.n < 8:
            raise ValueError(f"n must be an integer >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def weight(self) -> float:
        """Quadrature weight h^d of a single node."""
        return self.h**self.dim

    @cached_property
    def coords(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return idx * self.h

    def node_index(self, multi) -> int:
        multi = tuple(int(i) % self.n for i in multi)
        return int(np.ravel_multi_index(multi, self.shape))

    def multi_index(self, node: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(int(node) % self.size, self.shape))

    def check_scalar(self, f, name="field") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.size,):
            raise GridMismatchError(f"{name} has shape {f.shape}, expected ({self.size},)")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"{name} contains non-finite values")
        return f

    def check_vector(self, V, name="vector field") -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if V.shape != (self.size, self.dim):
            raise GridMismatchError(f"{name} has shape {V.shape}, expected ({self.size}, {self.dim})")
        if not np.all(np.isfinite(V)):
            raise ValueError(f"{name} contains non-finite values")
        return V

    def constant(self, value=1.0) -> np.ndarray:
        return np.full(self.size, float(value))

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(x)`` with ``x`` of shape (N, d) on the nodes."""
        return np.asarray(func(self.coords), dtype=float).reshape(self.size)

    # sparse matrices ---------------------------------------------------

    def _shift(self, axis: int, offset: int) -> sp.csr_matrix:
        """Matrix S with (S f)[j] = f[j + offset * e_axis] (periodic)."""
        idx = np.arange(self.size).reshape(self.shape)
        cols = np.roll(idx, -offset, axis=axis).ravel()
        rows = np.arange(self.size)
        return sp.csr_matrix((np.ones(self.size), (rows, cols)), shape=(self.size, self.size))

    @cached_property
    def difference_matrices(self) -> tuple[sp.csr_matrix, ...]:
        """Centered first differences along each axis."""
        mats = []
        for axis in range(self.dim):
            D = (self._shift(axis, 1) - self._shift(axis, -1)) / (2.0 * self.h)
            mats.append(D.tocsr())
        return tuple(mats)

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        L = sp.csr_matrix((self.size, self.size))
        for axis in range(self.dim):
            L = L + self._shift(axis, 1) + self._shift(axis, -1)
        L = L - 2.0 * self.dim * sp.identity(self.size, format="csr")
        return (L / self.h**2).tocsr()


def _as_array(grid: TorusGrid, f) -> np.ndarray:
    return np.asarray(f, dtype=float).reshape(grid.shape)


def gradient(grid: TorusGrid, f) -> np.ndarray:
    """Centered-difference gradient, shape (N, d)."""
    F = _as_array(grid, grid.check_scalar(f))
    out = np.empty((grid.size, grid.dim))
    for axis in range(grid.dim):
        out[:, axis] = ((np.roll(F, -1, axis) - np.roll(F, 1, axis)) / (2.0 * grid.h)).ravel()
    return out


def laplacian(grid: TorusGrid, f) -> np.ndarray:
    F = _as_array(grid, grid.check_scalar(f))
    out = -2.0 * grid.dim * F
    for axis in range(grid.dim):
        out = out + np.roll(F, -1, axis) + np.roll(F, 1, axis)
    return (out / grid.h**2).ravel()


def hessian(grid: TorusGrid, f) -> np.ndarray:
    """Second differences, shape (N, d, d).

    Diagonal entries use the compact three-point stencil; mixed entries are
    products of centered differences.
    """
    F = _as_array(grid, grid.check_scalar(f))
    h = grid.h
    out = np.empty((grid.size, grid.dim, grid.dim))
    first = [(np.roll(F, -1, a) - np.roll(F, 1, a)) / (2 * h) for a in range(grid.dim)]
    for i in range(grid.dim):
        out[:, i, i] = ((np.roll(F, -1, i) - 2 * F + np.roll(F, 1, i)) / h**2).ravel()
        for j in range(i + 1, grid.dim):
            mixed = (np.roll(first[i], -1, j) - np.roll(first[i], 1, j)) / (2 * h)
            out[:, i, j] = out[:, j, i] = mixed.ravel()
    return out


def transport_operator(grid: TorusGrid, V) -> sp.csr_matrix:
    """Sparse matrix of phi -> Lap(phi) + V . D(phi)."""
    V = grid.check_vector(V)
    A = grid.laplacian_matrix
    for axis, D in enumerate(grid.difference_matrices):
        A = A + sp.diags(V[:, axis]) @ D
    return A.tocsr()


def fp_operator(grid: TorusGrid, V) -> sp.csr_matrix:
    """Discrete Fokker-Planck operator m -> Lap(m) - div(V m).

    Defined as the transpose of :func:`transport_operator`; its columns sum
    to zero, so the total mass of the output vanishes identically.
    """
    return transport_operator(grid, V).T.tocsr()


def integrate(grid: TorusGrid, f) -> float:
    """Trapezoid rule on the torus: h^d * sum(f)."""
    f = grid.check_scalar(f)
    return float(grid.weight * np.sum(f))


def integrate_against(grid: TorusGrid, f, m) -> float:
    f = grid.check_scalar(f)
    m = grid.check_scalar(m, "density")
    return float(grid.weight * np.dot(f, m))


pairing = integrate_against
