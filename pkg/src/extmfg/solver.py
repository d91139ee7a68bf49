"""Discrete lambda-system, bordered Newton solver and natural continuation.

Unknowns are the nodal values of u and m plus the scalar Hbar; the velocity
field is eliminated through :func:`resolve_velocity`.  The residual has
2N + 2 rows::

    HJB   Lap(u) + H_lam(x, Du, m, V) - Hbar        (N rows)
    FP    fp_operator(V) m                          (N rows)
    mass  int m - 1
    mean  int u

The Newton matrix carries one extra multiplier column on the FP rows, which
makes it square; since the FP rows always sum to zero that multiplier
vanishes at every solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ContinuationError,
    DomainError,
    NewtonStalledError,
    OracleError,
    SingularSystemError,
    VelocityFixedPointError,
)
from .hamiltonians import HamiltonianModel, blend
from .torus import TorusGrid, fp_operator, gradient, integrate, laplacian, transport_operator

logger = logging.getLogger(__name__)

__all__ = [
    "MFGState",
    "ContinuationConfig",
    "TraceEntry",
    "ContinuationTrace",
    "LinearizedSystem",
    "initial_state",
    "resolve_velocity",
    "assemble_residual",
    "assemble_linearization",
    "newton_solve",
    "continuation_run",
    "picard_oracle",
]


@dataclass
class MFGState:
    """Candidate solution (u, m, V, Hbar) on ``grid``."""

    grid: TorusGrid
    u: np.ndarray
    m: np.ndarray
    V: np.ndarray
    Hbar: float

    def copy(self) -> MFGState:
        return MFGState(self.grid, self.u.copy(), self.m.copy(), self.V.copy(), float(self.Hbar))

    def check(self, tol: float = 1e-12):
        """Raise if the normalization or positivity invariants fail."""
        g = self.grid
        g.check_scalar(self.u, "u")
        g.check_scalar(self.m, "m")
        g.check_vector(self.V, "V")
        if not np.min(self.m) > 0:
            j = int(np.argmin(self.m))
            raise DomainError(f"density is not strictly positive (m={self.m[j]!r} at node {j})", node=j)
        mass = integrate(g, self.m)
        if abs(mass - 1.0) > tol:
            raise ValueError(f"int m = {mass!r} differs from 1 by more than {tol}")
        mean = integrate(g, self.u)
        if abs(mean) > tol:
            raise ValueError(f"int u = {mean!r} exceeds {tol}")

    def max_distance(self, other: MFGState) -> float:
        return float(
            max(
                np.max(np.abs(self.u - other.u)),
                np.max(np.abs(self.m - other.m)),
                np.max(np.abs(self.V - other.V)),
                abs(self.Hbar - other.Hbar),
            )
        )


@dataclass
class ContinuationConfig:
    lambda_step0: float = 0.1
    step_growth: float = 1.5
    step_cap: float = 0.25
    max_halvings: int = 10
    newton_tol: float = 1e-10
    max_newton_iters: int = 30
    linear_solver: str = "auto"
    tau: float = 0.9
    armijo_factor: float = 0.5
    max_backtracks: int = 30

    def __post_init__(self):
        for name in ("lambda_step0", "step_growth", "step_cap", "newton_tol", "armijo_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.max_newton_iters < 1 or self.max_halvings < 0:
            raise ValueError("iteration limits must be positive")
        if self.linear_solver not in ("auto", "direct", "iterative"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class TraceEntry:
    lam: float
    iterations: int
    residual: float
    diagnostics: dict = field(default_factory=dict)
    flags: tuple = ()


@dataclass
class ContinuationTrace:
    entries: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def lambdas(self):
        return [e.lam for e in self.entries]

    @property
    def completed(self) -> bool:
        return bool(self.entries) and self.entries[-1].lam == 1.0


# basic pieces --------------------------------------------------------------


def initial_state(model: HamiltonianModel, grid: TorusGrid) -> MFGState:
    """Seed (0, 1, 0, -g(1)), which solves the lambda = 0 system exactly."""
    return MFGState(
        grid,
        np.zeros(grid.size),
        np.ones(grid.size),
        np.zeros((grid.size, grid.dim)),
        -model.coupling.at_one(),
    )


def resolve_velocity(
    model: HamiltonianModel,
    grid: TorusGrid,
    u,
    m,
    method: str = "auto",
    damping: float = 1.0,
    tol: float = 1e-14,
    max_iter: int = 200,
) -> np.ndarray:
    """Solve V = D_pH(x, Du, m, V).

    ``method`` is ``"auto"`` (closed form when available), ``"closed"`` or
    ``"fixed_point"``.
    """
    m = np.asarray(m, dtype=float)
    x = grid.coords
    P = gradient(grid, u)
    if not model.depends_on_velocity:
        return model.grad_p(x, P, m, model.context(grid, m))
    c = model.velocity_coupling
    if method == "closed" or (method == "auto" and c is not None):
        if c is None:
            raise ValueError("closed-form velocity needs a moment-coupled model")
        G = model.grad_p(x, P, m, model.context(grid, m))
        # exact for any mass; reduces to int G m / (1 - c) when int m = 1
        denom = 1.0 - c * integrate(grid, m)
        if abs(denom) < 1e-14:
            raise VelocityFixedPointError("velocity coupling makes the fixed point singular")
        J = grid.weight * (G.T @ m) / denom
        return G + c * J
    if method not in ("auto", "fixed_point"):
        raise ValueError(f"unknown velocity method {method!r}")

    V = model.grad_p(x, P, m, model.context(grid, m))
    prev = None
    growing = 0
    ratio = None
    for _ in range(max_iter):
        target = model.grad_p(x, P, m, model.context(grid, m, V))
        err = float(np.max(np.abs(target - V)))
        if err <= tol * max(1.0, float(np.max(np.abs(V)))):
            return target
        if prev is not None and prev > 0:
            ratio = err / prev
            growing = growing + 1 if ratio >= 1.0 else 0
            if growing >= 5:
                raise VelocityFixedPointError(f"velocity fixed point diverged (ratio {ratio:.3g})", ratio)
        prev = err
        V = (1.0 - damping) * V + damping * target
    raise VelocityFixedPointError(f"velocity fixed point diverged: no convergence in {max_iter} sweeps", ratio)


def _positive(m):
    if not np.all(m > 0):
        j = int(np.argmin(m))
        raise DomainError(f"density is not strictly positive (m={m[j]!r} at node {j})", node=j)


def assemble_residual(model: HamiltonianModel, grid: TorusGrid, state: MFGState, V=None) -> np.ndarray:
    """Residual vector of length 2N + 2 (see module docstring)."""
    u, m = state.u, state.m
    _positive(m)
    if V is None:
        V = resolve_velocity(model, grid, u, m)
    ctx = model.context(grid, m, V)
    P = gradient(grid, u)
    hjb = laplacian(grid, u) + model.value(grid.coords, P, m, ctx) - state.Hbar
    fp = fp_operator(grid, V) @ m
    return np.concatenate([hjb, fp, [integrate(grid, m) - 1.0, integrate(grid, u)]])


# linearization -------------------------------------------------------------


@dataclass
class LinearizedSystem:
    """Bordered Newton matrix with unknown ordering (psi, f, hbar, mu)."""

    matrix: object
    rhs: np.ndarray
    n_nodes: int

    @property
    def is_dense(self) -> bool:
        return isinstance(self.matrix, np.ndarray)

    def apply(self, psi, f, hbar) -> np.ndarray:
        z = np.concatenate([psi, f, [hbar, 0.0]])
        return np.asarray(self.matrix @ z).ravel()

    def todense(self) -> np.ndarray:
        return self.matrix if self.is_dense else self.matrix.toarray()

    def solve(self, method: str = "direct", rhs=None) -> np.ndarray:
        b = self.rhs if rhs is None else rhs
        if self.is_dense:
            try:
                with np.errstate(all="raise"):
                    sol = sla.lu_solve(sla.lu_factor(self.matrix, check_finite=True), b)
            except (sla.LinAlgError, FloatingPointError, ValueError) as exc:
                raise SingularSystemError(f"dense Newton solve failed: {exc}") from exc
        elif method == "iterative":
            A = self.matrix.tocsc()
            try:
                ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
            except RuntimeError as exc:
                raise SingularSystemError(f"incomplete factorization failed: {exc}") from exc
            M = spla.LinearOperator(A.shape, ilu.solve)
            sol, info = spla.gmres(A, b, M=M, rtol=1e-13, atol=0.0, restart=60, maxiter=200)
            if info != 0:
                raise SingularSystemError(f"GMRES did not converge (info={info})")
        else:
            try:
                sol = spla.splu(self.matrix.tocsc()).solve(b)
            except RuntimeError as exc:
                raise SingularSystemError(f"sparse Newton solve failed: {exc}") from exc
        if not np.all(np.isfinite(sol)):
            raise SingularSystemError("Newton solve produced non-finite values")
        return sol


def assemble_linearization(model: HamiltonianModel, grid: TorusGrid, state: MFGState) -> LinearizedSystem:
    """Jacobian of :func:`assemble_residual` with the velocity eliminated.

    The velocity perturbation solves W = B0(D psi) + B1(f) + B2(W); it then
    enters the HJB rows through A2(W) and the FP rows as -div(W m), using
    the same transposed differences as :func:`fp_operator`.
    """
    N, d = grid.size, grid.dim
    u, m = state.u, state.m
    _positive(m)
    V = resolve_velocity(model, grid, u, m)
    x = grid.coords
    P = gradient(grid, u)
    ctx = model.context(grid, m, V)
    Hpp = model.hess_pp(x, P, m, ctx)
    gprime = model.coupling.dg(m)
    Ds = grid.difference_matrices
    A = transport_operator(grid, V)
    w = grid.weight

    S = [sum(sp.diags(Hpp[:, i, k]) @ Ds[k] for k in range(d)).tocsr() for i in range(d)]

    if model.is_local:
        J_uu = A
        J_um = -sp.diags(gprime)
        J_mu = sum(Ds[i].T @ sp.diags(m) @ S[i] for i in range(d))
        J_mm = A.T
        blocks = [
            [J_uu, J_um, sp.csr_matrix(-np.ones((N, 1))), None],
            [J_mu, J_mm, None, sp.csr_matrix(np.ones((N, 1)))],
            [None, sp.csr_matrix(w * np.ones((1, N))), None, None],
            [sp.csr_matrix(w * np.ones((1, N))), None, None, None],
        ]
        mat = sp.bmat(blocks, format="csr")
    else:
        eye = np.eye(N)
        S_dense = np.stack([s.toarray() for s in S], axis=1)
        dV_u = model.velocity_resolvent(S_dense, x, P, ctx)
        dV_m = model.velocity_resolvent(model.b1(eye, x, P, ctx), x, P, ctx)
        Ad = A.toarray()
        J_uu = Ad + model.a2(dV_u, x, P, ctx)
        J_um = model.a1(eye, x, P, ctx) - np.diag(gprime) + model.a2(dV_m, x, P, ctx)
        J_mu = sum(Ds[i].T @ (m[:, None] * dV_u[:, i, :]) for i in range(d))
        J_mm = Ad.T + sum(Ds[i].T @ (m[:, None] * dV_m[:, i, :]) for i in range(d))
        mat = np.zeros((2 * N + 2, 2 * N + 2))
        mat[:N, :N] = J_uu
        mat[:N, N : 2 * N] = J_um
        mat[:N, 2 * N] = -1.0
        mat[N : 2 * N, :N] = J_mu
        mat[N : 2 * N, N : 2 * N] = J_mm
        mat[N : 2 * N, 2 * N + 1] = 1.0
        mat[2 * N, N : 2 * N] = w
        mat[2 * N + 1, :N] = w

    data = mat if isinstance(mat, np.ndarray) else mat.data
    if not np.all(np.isfinite(data)):
        bad = np.flatnonzero(~np.isfinite(np.asarray(data).ravel()))[0]
        raise SingularSystemError(f"non-finite Jacobian entry (flat index {bad})")
    rhs = -assemble_residual(model, grid, state, V)
    return LinearizedSystem(mat, rhs, N)


# Newton --------------------------------------------------------------------


def _linear_method(config: ContinuationConfig, grid: TorusGrid) -> str:
    if config.linear_solver == "auto":
        return "direct" if grid.dim <= 2 else "iterative"
    return config.linear_solver


def _project(grid: TorusGrid, u, m):
    u = u - np.mean(u)
    m = m / integrate(grid, m)
    return u, m


def newton_solve(model: HamiltonianModel, grid: TorusGrid, state: MFGState, config: ContinuationConfig | None = None):
    """Bordered Newton iteration with positivity damping and Armijo backtracking.

    Returns ``(state, iterations)``.
    """
    config = config or ContinuationConfig()
    if not np.all(state.m > 0):
        j = int(np.argmin(state.m))
        raise DomainError(f"initial density is not strictly positive at node {j}", node=j)
    N = grid.size
    method = _linear_method(config, grid)

    V = resolve_velocity(model, grid, state.u, state.m)
    current = MFGState(grid, state.u.copy(), state.m.copy(), V, float(state.Hbar))
    r = assemble_residual(model, grid, current, V)
    if not np.all(np.isfinite(r)):
        raise DomainError("initial residual is not finite")
    res = float(np.max(np.abs(r)))
    best = res
    if res <= config.newton_tol:
        return current, 0

    for it in range(1, config.max_newton_iters + 1):
        system = assemble_linearization(model, grid, current)
        delta = system.solve(method)
        du, dm, dH = delta[:N], delta[N : 2 * N], delta[2 * N]

        t = 1.0
        shrinking = dm < 0
        if np.any(shrinking):
            t = min(1.0, float(np.min(config.tau * current.m[shrinking] / -dm[shrinking])))

        phi0 = float(np.linalg.norm(r))
        accepted = None
        for _ in range(config.max_backtracks + 1):
            trial = MFGState(grid, current.u + t * du, current.m + t * dm, current.V, current.Hbar + t * dH)
            try:
                r_trial = assemble_residual(model, grid, trial)
            except (DomainError, VelocityFixedPointError):
                r_trial = None
            if r_trial is not None and np.all(np.isfinite(r_trial)):
                if np.linalg.norm(r_trial) <= (1.0 - 1e-4 * t) * phi0:
                    accepted = trial
                    break
            t *= config.armijo_factor
        if accepted is None:
            raise NewtonStalledError(
                f"newton stalled: line search failed at iteration {it} (residual {best:.3e})",
                best_residual=best,
                iterations=it,
            )

        u, m = _project(grid, accepted.u, accepted.m)
        V = resolve_velocity(model, grid, u, m)
        current = MFGState(grid, u, m, V, accepted.Hbar)
        r = assemble_residual(model, grid, current, V)
        res = float(np.max(np.abs(r)))
        best = min(best, res)
        logger.debug("newton it=%d step=%.3g residual=%.3e", it, t, res)
        if res <= config.newton_tol:
            return current, it

    raise NewtonStalledError(
        f"newton stalled after {config.max_newton_iters} iterations (best residual {best:.3e})",
        best_residual=best,
        iterations=config.max_newton_iters,
    )


# continuation --------------------------------------------------------------


def continuation_run(
    model: HamiltonianModel,
    grid: TorusGrid,
    config: ContinuationConfig | None = None,
    diagnostics=None,
):
    """Follow the lambda-family from the seed at lambda = 0 up to lambda = 1.

    ``diagnostics`` is an optional callable ``(model_lam, grid, state) ->
    (dict, flags)`` evaluated at every accepted state.  Returns
    ``(state, trace)``; raises :class:`ContinuationError` carrying the
    partial trace when the step size underflows.
    """
    config = config or ContinuationConfig()
    state = initial_state(model, grid)
    trace = ContinuationTrace()
    lam, step, halvings = 0.0, config.lambda_step0, 0

    def accept(lam_new, new_state, iterations):
        res = float(np.max(np.abs(assemble_residual(blend(model, lam_new), grid, new_state, new_state.V))))
        diag, flags = ({}, ())
        if diagnostics is not None:
            diag, flags = diagnostics(blend(model, lam_new), grid, new_state)
        trace.entries.append(TraceEntry(lam_new, iterations, res, diag, tuple(flags)))

    while lam < 1.0:
        # the current state may already solve the target problem
        target = blend(model, 1.0)
        V1 = resolve_velocity(target, grid, state.u, state.m)
        r1 = assemble_residual(target, grid, state, V1)
        if np.max(np.abs(r1)) <= config.newton_tol:
            state = MFGState(grid, state.u, state.m, V1, state.Hbar)
            lam = 1.0
            accept(1.0, state, 0)
            break

        lam_try = min(1.0, lam + step)
        try:
            new_state, its = newton_solve(blend(model, lam_try), grid, state, config)
        except (NewtonStalledError, SingularSystemError, VelocityFixedPointError, DomainError) as exc:
            halvings += 1
            trace.notes.append(f"lambda={lam_try:.6g} rejected: {exc}")
            if halvings > config.max_halvings:
                raise ContinuationError(f"continuation stuck at lambda={lam:.6g}", trace=trace, state=state, lam=lam) from exc
            step *= 0.5
            continue
        lam, state, halvings = lam_try, new_state, 0
        accept(lam, state, its)
        step = min(step * config.step_growth, config.step_cap)
    return state, trace


# Picard oracle -------------------------------------------------------------


def _solve_hjb(model, grid, m, ctx, u, Hbar, tol=1e-12, max_iter=50):
    """Newton on the HJB equation with frozen (m, ctx) and the int u = 0 border."""
    N = grid.size
    x = grid.coords
    w = grid.weight
    L = grid.laplacian_matrix
    Ds = grid.difference_matrices
    border_col = sp.csr_matrix(-np.ones((N, 1)))
    border_row = sp.csr_matrix(w * np.ones((1, N)))

    def residual(u, Hbar):
        P = gradient(grid, u)
        return np.concatenate([laplacian(grid, u) + model.value(x, P, m, ctx) - Hbar, [integrate(grid, u)]])

    r = residual(u, Hbar)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            break
        G = model.grad_p(x, gradient(grid, u), m, ctx)
        Jm = L + sum(sp.diags(G[:, i]) @ Ds[i] for i in range(grid.dim))
        mat = sp.bmat([[Jm, border_col], [border_row, None]], format="csc")
        delta = spla.splu(mat).solve(-r)
        t = 1.0
        norm0 = np.linalg.norm(r)
        for _ in range(30):
            u_t, H_t = u + t * delta[:N], Hbar + t * delta[N]
            r_t = residual(u_t, H_t)
            if np.linalg.norm(r_t) < norm0 or t < 1e-8:
                break
            t *= 0.5
        step = float(np.max(np.abs(t * delta)))
        u, Hbar, r = u_t, H_t, r_t
        if step <= 1e-15 * max(1.0, float(np.max(np.abs(u)))):
            break
    return u, float(Hbar)


def _solve_fp(grid, V):
    """Stationary density: fp_operator(V) m = 0 with int m = 1."""
    N = grid.size
    mat = sp.bmat(
        [
            [fp_operator(grid, V), sp.csr_matrix(np.ones((N, 1)))],
            [sp.csr_matrix(grid.weight * np.ones((1, N))), None],
        ],
        format="csc",
    )
    rhs = np.zeros(N + 1)
    rhs[N] = 1.0
    return spla.splu(mat).solve(rhs)[:N]


def picard_oracle(
    model: HamiltonianModel,
    grid: TorusGrid,
    tol: float = 1e-13,
    relax: float = 0.5,
    max_sweeps: int = 10_000,
) -> MFGState:
    """Independent fixed-point solver for the lambda = 1 system.

    Alternates an HJB solve with frozen density, a linear FP solve and an
    under-relaxed density update.  Meant for velocity-independent models or
    small velocity coupling.
    """
    state = initial_state(model, grid)
    u, m, Hbar, V = state.u, state.m, state.Hbar, state.V
    for sweep in range(max_sweeps):
        ctx = model.context(grid, m, V)
        u, Hbar = _solve_hjb(model, grid, m, ctx, u, Hbar)
        V = resolve_velocity(model, grid, u, m)
        m_new = _solve_fp(grid, V)
        if not np.all(m_new > 0):
            raise OracleError(f"oracle produced a nonpositive density at sweep {sweep}")
        diff = float(np.max(np.abs(m_new - m)))
        m = relax * m_new + (1.0 - relax) * m
        if diff <= tol:
            break
    else:
        raise OracleError(f"picard oracle did not converge in {max_sweeps} sweeps")

    # final consistent solve at the converged density
    for _ in range(3):
        ctx = model.context(grid, m, V)
        u, Hbar = _solve_hjb(model, grid, m, ctx, u, Hbar)
        V = resolve_velocity(model, grid, u, m)
    u = u - np.mean(u)
    return MFGState(grid, u, m, V, Hbar)
