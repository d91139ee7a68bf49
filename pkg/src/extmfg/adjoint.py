"""Adjoint density of a stationary HJB solution and the representation formula.

Given w with Lap(w) + F(x, Dw) = 0, the adjoint density solves

    rho_t + div(D_pF(x, Dw) rho) = Lap(rho),   rho(., 0) = delta_{x0}

and w(x0) = int_0^T int (F - Dw . D_pF) rho dx dt + int w rho(., T) dx.
Implicit Euler on the transpose of the transport operator, paired with
right-endpoint time quadrature, makes this identity hold exactly up to the
stationary residual of w.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AdjointError
from .hamiltonians import HamiltonianModel
from .solver import MFGState
from .torus import TorusGrid, gradient, laplacian, transport_operator

__all__ = [
    "FrozenHamiltonian",
    "FunctionF",
    "AdjointRun",
    "evolve_adjoint",
    "representation_check",
    "oscillation_bound_panel",
    "positivity_dt_bound",
    "stationary_residual",
]

UNDERSHOOT_TOL = 1e-12


class FrozenHamiltonian:
    """F(x, p) = H(x, p, m, V) - Hbar with m, V frozen at a solved state.

    Only defined on grid nodes since H depends on m(x) pointwise.
    """

    def __init__(self, model: HamiltonianModel, state: MFGState):
        self.model = model
        self.grid = state.grid
        self.m = state.m
        self.hbar = float(state.Hbar)
        self.ctx = model.context(state.grid, state.m, state.V)

    def value(self, P):
        return self.model.value(self.grid.coords, P, self.m, self.ctx) - self.hbar

    def grad_p(self, P):
        return self.model.grad_p(self.grid.coords, P, self.m, self.ctx)


class FunctionF:
    """F built from callables ``value(x, p)`` and ``grad_p(x, p)``."""

    def __init__(self, grid: TorusGrid, value, grad_p):
        self.grid = grid
        self._value = value
        self._grad_p = grad_p

    def value(self, P):
        return np.asarray(self._value(self.grid.coords, P), dtype=float).reshape(self.grid.size)

    def grad_p(self, P):
        return np.asarray(self._grad_p(self.grid.coords, P), dtype=float).reshape(self.grid.size, self.grid.dim)

    @classmethod
    def zero(cls, grid: TorusGrid):
        return cls(grid, lambda x, p: np.zeros(len(x)), lambda x, p: np.zeros_like(p))


@dataclass
class AdjointRun:
    grid: TorusGrid
    x0: int
    T: float
    K: int
    q: float
    w: np.ndarray = field(repr=False)
    drift: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    norm_q: np.ndarray = field(repr=False)
    energy: np.ndarray = field(repr=False)
    rho0: np.ndarray = field(repr=False)
    rho_final: np.ndarray = field(repr=False)
    rho_sum: np.ndarray = field(repr=False)  # sum of rho^1 .. rho^K
    slices: dict = field(default_factory=dict, repr=False)

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def max_mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - 1.0)))

    def rows(self):
        """(t, mass, ||rho||_q, int |Dw|^2 rho) per time level."""
        return list(zip(self.times, self.mass, self.norm_q, self.energy))


def positivity_dt_bound(grid: TorusGrid, drift) -> float:
    """Sufficient step size h^2 / (2d + h max|b|) for a nonnegative adjoint."""
    bmax = float(np.max(np.linalg.norm(drift, axis=1))) if drift.size else 0.0
    return grid.h**2 / (2 * grid.dim + grid.h * bmax)


def _lq(grid, rho, q):
    return float((grid.weight * np.sum(np.abs(rho) ** q)) ** (1.0 / q))


def evolve_adjoint(
    F, w, x0, T: float = 1.0, K: int = 200, dump_every: int = 0, r: float | None = None
) -> AdjointRun:
    """Implicit-Euler adjoint evolution from the scaled indicator of node ``x0``.

    ``x0`` is a flat node index or a multi-index.  ``dump_every > 0`` keeps
    every such slice (plus the last) in ``run.slices``.  ``r`` sets the
    reported norm exponent q = r / (r - 1); default r = d + 1.
    """
    grid = F.grid
    w = grid.check_scalar(w, "w")
    if T <= 0 or K < 1:
        raise ValueError("need T > 0 and K >= 1")
    r = float(grid.dim + 1) if r is None else float(r)
    if r <= 1:
        raise ValueError(f"norm exponent r must exceed 1, got {r}")
    q = r / (r - 1.0)
    node = grid.node_index(x0) if np.ndim(x0) else int(x0)
    if not 0 <= node < grid.size:
        raise ValueError(f"source node {x0} outside the grid")
    Dw = gradient(grid, w)
    drift = grid.check_vector(F.grad_p(Dw), "D_pF")
    dw2 = np.einsum("kd,kd->k", Dw, Dw)
    dt = T / K
    At = transport_operator(grid, drift).T
    system = (sp.identity(grid.size, format="csc") - dt * At).tocsc()
    try:
        lu = spla.splu(system)
    except RuntimeError as exc:
        raise AdjointError(f"adjoint step matrix is singular: {exc}") from exc
    bound = positivity_dt_bound(grid, drift)

    rho = np.zeros(grid.size)
    rho[node] = 1.0 / grid.weight
    rho0 = rho.copy()
    times, mass, norm_q, energy = [0.0], [1.0], [_lq(grid, rho, q)], [grid.weight * float(dw2 @ rho)]
    rho_sum = np.zeros(grid.size)
    slices = {0: rho0.copy()} if dump_every > 0 else {}
    warned = False
    for k in range(1, K + 1):
        rho = lu.solve(rho)
        if not np.all(np.isfinite(rho)):
            raise AdjointError(f"adjoint solve produced non-finite values at step {k}")
        low = float(rho.min())
        if low < -UNDERSHOOT_TOL:
            msg = f"adjoint density undershoot {low:.3g} at step {k}: dt too large, suggest larger K"
            if dt <= bound:
                raise AdjointError(msg)
            if not warned:
                warnings.warn(msg + f" (positivity bound dt <= {bound:.3g})", RuntimeWarning, stacklevel=2)
                warned = True
        rho_sum += rho
        times.append(k * dt)
        mass.append(grid.weight * float(rho.sum()))
        norm_q.append(_lq(grid, rho, q))
        energy.append(grid.weight * float(dw2 @ rho))
        if dump_every > 0 and (k % dump_every == 0 or k == K):
            slices[k] = rho.copy()
    return AdjointRun(
        grid, node, float(T), int(K), q, w.copy(), drift,
        np.array(times), np.array(mass), np.array(norm_q), np.array(energy),
        rho0, rho, rho_sum, slices,
    )


def representation_check(F, w, run: AdjointRun, quadrature: str = "right") -> float:
    """RHS of the representation formula minus w(x0).

    ``quadrature="right"`` evaluates the time integral at rho^{k+1} (the
    exact discrete choice); ``"midpoint"`` averages rho^k and rho^{k+1}.
    """
    grid = run.grid
    w = grid.check_scalar(w, "w")
    Dw = gradient(grid, w)
    integrand = F.value(Dw) - np.einsum("kd,kd->k", Dw, F.grad_p(Dw))
    if quadrature == "right":
        weights = run.rho_sum
    elif quadrature == "midpoint":
        weights = run.rho_sum + 0.5 * (run.rho0 - run.rho_final)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}; expected 'right' or 'midpoint'")
    rhs = run.dt * grid.weight * float(integrand @ weights) + grid.weight * float(w @ run.rho_final)
    return rhs - float(w[run.x0])


def stationary_residual(F, w) -> np.ndarray:
    """Lap(w) + F(x, Dw) on the nodes."""
    grid = F.grid
    return laplacian(grid, w) + F.value(gradient(grid, w))


def oscillation_bound_panel(F, w, run: AdjointRun) -> dict:
    """Quantities of the oscillation estimate; no inequality is asserted."""
    grid = run.grid
    w = grid.check_scalar(w, "w")
    Dw = gradient(grid, w)
    dw2 = np.einsum("kd,kd->k", Dw, Dw)
    return {
        "q": run.q,
        "lhs": run.dt * float(np.sum(run.energy[1:])),
        "lhs_reordered": run.dt * grid.weight * float(dw2 @ run.rho_sum),
        "rho_L1_Lq": run.dt * float(np.sum(run.norm_q[1:])),
        "osc_w": float(np.max(w) - np.min(w)) if math.isfinite(float(np.max(w))) else math.inf,
    }
