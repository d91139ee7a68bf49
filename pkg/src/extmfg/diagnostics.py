"""Discrete estimate quantities, integral identities and the monotonicity form.

Every quantity uses the solver's own centered differences and torus
quadrature, so identities that rely on integration by parts hold up to the
residual of the state rather than up to discretization error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .hamiltonians import HamiltonianModel, PowerCoupling
from .solver import MFGState
from .torus import TorusGrid, fp_operator, gradient, hessian, integrate, integrate_against, transport_operator

__all__ = [
    "DEFAULT_EXPONENTS",
    "DiagnosticsOptions",
    "MonotonicityResult",
    "energy_identity_gap",
    "multiplier_identity_gaps",
    "norm_panel",
    "monotonicity_form",
    "default_theta",
    "sample_monotonicity",
    "diagnostics_report",
    "report_keys",
    "write_report_csv",
]

DEFAULT_EXPONENTS = (0.5, 1.0, 2.0, -1.0, -0.1)


def _require_positive(m):
    if not np.all(m > 0):
        j = int(np.argmin(m))
        raise DomainError(f"density must be positive (m={m[j]!r} at node {j})", node=j)


def _hamiltonian_terms(model, grid, state):
    x = grid.coords
    P = gradient(grid, state.u)
    ctx = model.context(grid, state.m, state.V)
    return x, P, ctx


def energy_identity_gap(model: HamiltonianModel, grid: TorusGrid, state: MFGState) -> float:
    """Hbar - int (H(x, Du, m, V) - V.Du) dm."""
    x, P, ctx = _hamiltonian_terms(model, grid, state)
    H = model.value(x, P, state.m, ctx)
    integrand = H - np.einsum("kd,kd->k", state.V, P)
    return float(state.Hbar - integrate_against(grid, integrand, state.m))


def _energy_scale(model, grid, state):
    x, P, ctx = _hamiltonian_terms(model, grid, state)
    H = model.value(x, P, state.m, ctx)
    integrand = H - np.einsum("kd,kd->k", state.V, P)
    return max(1.0, abs(state.Hbar), integrate_against(grid, np.abs(integrand), state.m))


def _test_functions(m, exponents, log_powers):
    phis = {"ln_m": np.log(m)}
    for r in exponents:
        phis[f"m^{r:g}"] = m**r
    for ell in log_powers:
        phis[f"|ln_m|^{ell:g}"] = np.abs(np.log(m)) ** ell
    return phis


def multiplier_identity_gaps(
    grid: TorusGrid, state: MFGState, V=None, exponents=DEFAULT_EXPONENTS, log_powers=(), relative=False
) -> dict:
    """<m, transport(V) phi> for phi in {ln m, m^r, |ln m|^l}.

    By construction each gap equals <fp_operator(V) m, phi>, i.e. the FP
    residual tested against phi.  Keys are ``"ln_m"``, ``"m^<r>"`` and
    ``"|ln_m|^<l>"``.  With ``relative=True`` each value is divided by
    int m |transport(V) phi| dx.
    """
    m = grid.check_scalar(state.m, "m")
    _require_positive(m)
    V = state.V if V is None else V
    A = transport_operator(grid, V)
    out = {}
    for name, phi in _test_functions(m, exponents, log_powers).items():
        Aphi = A @ phi
        gap = integrate_against(grid, Aphi, m)
        if relative:
            scale = integrate_against(grid, np.abs(Aphi), m)
            gap = gap / scale if scale > 0 else 0.0
        out[name] = float(gap)
    return out


def _h1(grid, f):
    Df = gradient(grid, f)
    return math.sqrt(integrate(grid, f * f + np.einsum("kd,kd->k", Df, Df)))


def norm_panel(model: HamiltonianModel, grid: TorusGrid, state: MFGState) -> dict:
    """Norms and integrals bounded by the a-priori estimates."""
    m, u, V = state.m, state.u, state.V
    _require_positive(m)
    x, P, ctx = _hamiltonian_terms(model, grid, state)
    g = model.coupling.g(m)
    H0 = model.h0(x, P, m, ctx)
    lnm = np.log(m)
    lnm_centered = lnm - integrate(grid, lnm)
    D2u = hessian(grid, u)
    return {
        "int_g_m": integrate(grid, g),
        "int_m_g_m": integrate(grid, m * g),
        "int_H0_dx": integrate(grid, H0),
        "int_H0_dm": integrate_against(grid, H0, m),
        "int_V2_dm": integrate_against(grid, np.einsum("kd,kd->k", V, V), m),
        "sqrt_m_H1": _h1(grid, np.sqrt(m)),
        # mean-free H1 norm: ln m is only determined up to the normalization constant
        "ln_m_H1": _h1(grid, lnm_centered),
        "inv_m_Linf": float(1.0 / np.min(m)),
        "min_m": float(np.min(m)),
        "osc_u": float(np.max(u) - np.min(u)),
        "lip_u": float(np.max(np.linalg.norm(P, axis=1))),
        "D2u_L2_dm": integrate_against(grid, np.einsum("kij,kij->k", D2u, D2u), m),
    }


@dataclass(frozen=True)
class MonotonicityResult:
    value: float
    defect: np.ndarray
    margin: float
    theta: float
    c_r: float


def default_theta(model: HamiltonianModel, grid: TorusGrid, state: MFGState) -> float:
    """theta = min(sigma_1/2, eta_0/2), sigma_1 = min(1, sigma), eta_0 = min g'(m)."""
    x, P, ctx = _hamiltonian_terms(model, grid, state)
    Hpp = model.hess_pp(x, P, state.m, ctx)
    sigma = float(np.min(np.linalg.eigvalsh(Hpp)))
    eta0 = float(np.min(model.coupling.dg(state.m)))
    return min(min(1.0, sigma) / 2.0, eta0 / 2.0)


def monotonicity_form(
    model: HamiltonianModel,
    grid: TorusGrid,
    state: MFGState,
    Q,
    f,
    W,
    theta: float | None = None,
    c_r: float = 12.0,
) -> MonotonicityResult:
    """Quadratic form of the linearized operator, its defect and margin.

    Evaluated at I(x) = (x, Du(x), m, V).  The margin is
    form - theta (int m|Q|^2 + int f^2) + c_r int |R|^2 m with R the defect
    W - B0(Q) - B1(f) - B2(W).
    """
    m = state.m
    Q = grid.check_vector(Q, "Q")
    f = grid.check_scalar(f, "f")
    W = grid.check_vector(W, "W")
    x, P, ctx = _hamiltonian_terms(model, grid, state)
    Hpp = model.hess_pp(x, P, m, ctx)
    B0Q = np.einsum("kij,kj->ki", Hpp, Q)
    B1f = model.b1(f, x, P, ctx)
    B2W = model.b2(W, x, P, ctx)
    A1f = model.a1(f, x, P, ctx)
    A2W = model.a2(W, x, P, ctx)
    gp = model.coupling.dg(m)
    dot = lambda a, b: np.einsum("kd,kd->k", a, b)  # noqa: E731
    integrand = m * dot(Q, B0Q) + m * dot(Q, B1f) + gp * f * f - f * A1f + m * dot(Q, B2W) - f * A2W
    value = integrate(grid, integrand)
    R = W - B0Q - B1f - B2W
    if theta is None:
        theta = default_theta(model, grid, state)
    margin = (
        value
        - theta * (integrate_against(grid, dot(Q, Q), m) + integrate(grid, f * f))
        + c_r * integrate_against(grid, dot(R, R), m)
    )
    return MonotonicityResult(float(value), R, float(margin), float(theta), float(c_r))


def random_directions(grid: TorusGrid, m, rng):
    """Random (Q, f, W) with int f = 0, scaled to unit combined size."""
    Q = rng.standard_normal((grid.size, grid.dim))
    f = rng.standard_normal(grid.size)
    f -= f.mean()
    W = rng.standard_normal((grid.size, grid.dim))
    size = (
        integrate_against(grid, np.sum(Q * Q, axis=1), m)
        + integrate(grid, f * f)
        + integrate_against(grid, np.sum(W * W, axis=1), m)
    )
    s = 1.0 / math.sqrt(size)
    return s * Q, s * f, s * W


def sample_monotonicity(
    model, grid, state, samples=20, theta=None, c_r=12.0, seed=0
) -> float:
    """Smallest margin over ``samples`` random unit directions."""
    rng = np.random.default_rng(seed)
    if theta is None:
        theta = default_theta(model, grid, state)
    worst = math.inf
    for _ in range(samples):
        Q, f, W = random_directions(grid, state.m, rng)
        worst = min(worst, monotonicity_form(model, grid, state, Q, f, W, theta, c_r).margin)
    return float(worst)


@dataclass
class DiagnosticsOptions:
    exponents: tuple = DEFAULT_EXPONENTS
    monotonicity_samples: int = 20
    theta: float | None = None
    c_r: float = 12.0
    seed: int = 0

    def exponents_for(self, model: HamiltonianModel) -> tuple:
        rs = list(self.exponents)
        if isinstance(model.coupling, PowerCoupling):
            extra = 2.0 * model.coupling.gamma - 1.0
            if extra not in rs:
                rs.append(extra)
        return tuple(rs)


def report_keys(model: HamiltonianModel, options: DiagnosticsOptions | None = None) -> list:
    options = options or DiagnosticsOptions()
    keys = [
        "hbar",
        "energy_gap",
        "energy_gap_rel",
        "int_g_m",
        "int_m_g_m",
        "int_H0_dx",
        "int_H0_dm",
        "int_V2_dm",
        "sqrt_m_H1",
        "ln_m_H1",
        "lnm_multiplier_gap",
        "lnm_multiplier_gap_rel",
    ]
    keys += [f"mr_multiplier_gap({r:g})" for r in options.exponents_for(model)]
    keys += ["inv_m_Linf", "min_m", "osc_u", "lip_u", "D2u_L2_dm", "monotonicity_margin"]
    return keys


def diagnostics_report(
    model: HamiltonianModel, grid: TorusGrid, state: MFGState, options: DiagnosticsOptions | None = None
) -> dict:
    """Full scalar panel in the fixed report key order."""
    options = options or DiagnosticsOptions()
    exps = options.exponents_for(model)
    gap = energy_identity_gap(model, grid, state)
    gaps = multiplier_identity_gaps(grid, state, exponents=exps)
    rel = multiplier_identity_gaps(grid, state, exponents=(), relative=True)
    panel = norm_panel(model, grid, state)
    values = {
        "hbar": float(state.Hbar),
        "energy_gap": gap,
        "energy_gap_rel": gap / _energy_scale(model, grid, state),
        "lnm_multiplier_gap": gaps["ln_m"],
        "lnm_multiplier_gap_rel": rel["ln_m"],
        "monotonicity_margin": (
            sample_monotonicity(model, grid, state, options.monotonicity_samples, options.theta, options.c_r, options.seed)
            if options.monotonicity_samples > 0
            else 0.0
        ),
    }
    values.update(panel)
    for r in exps:
        values[f"mr_multiplier_gap({r:g})"] = gaps[f"m^{r:g}"]
    return {k: float(values[k]) for k in report_keys(model, options)}


def make_step_diagnostics(options: DiagnosticsOptions | None = None):
    """Callable for :func:`continuation_run` returning (report, flags)."""
    options = options or DiagnosticsOptions()

    def run(model, grid, state):
        report = diagnostics_report(model, grid, state, options)
        flags = []
        if options.monotonicity_samples > 0 and report["monotonicity_margin"] < 0:
            flags.append("monotonicity margin negative")
        return report, flags

    return run


def format_float(v: float) -> str:
    return f"{v:.17g}"


def write_report_csv(path, rows, keys):
    """Header row plus one row per report, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in rows:
            writer.writerow([format_float(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


# the FP residual tested against phi; exposed for the invariant checks
def fp_residual(grid: TorusGrid, state: MFGState) -> np.ndarray:
    return fp_operator(grid, state.V) @ state.m
