"""Sampled falsification of the structural hypotheses on a Hamiltonian.

Each hypothesis is an inequality ``lhs <= rhs`` (or a matrix bound) that
should hold for every (x, p, m, V).  The checker draws random nodes, momenta
in a ball and smooth random density/velocity fields, evaluates
``margin = rhs - lhs`` at every sample and keeps the worst one with its
witness.  A hypothesis passes iff its worst margin is >= -tolerance.

Suites:

* ``"A"``  quasi-variational bounds A1-A11 on H, H_0 and g.
* ``"D"``  bounds D1-D8 on h(x, p), the velocity-free part of H_0.
* ``"H"``  the special anisotropic structure H_0 = a(x)|p|^2/2 + G.
* ``"C"``  pointwise coercivity of the monotonicity form and the velocity
  smallness threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonians import HamiltonianModel
from .torus import TorusGrid

__all__ = ["HypothesisRecord", "AssumptionReport", "SUITES", "DEFAULT_CONSTANTS", "check_assumptions"]

SUITES = ("A", "D", "H", "C")

DEFAULT_CONSTANTS = {
    "A": {"C": 2.0, "c": 0.5, "delta": 0.0, "delta0": None, "kappa": 1.0, "growth_beta": 1.0},
    "D": {"C": 2.0, "c": 0.5, "sigma": 1.0, "growth_beta": 1.0},
    "H": {"C": 2.0, "epsilon": 0.0, "alpha_min": 0.5, "kappa": 1.0},
    "C": {"theta": None},
}

# relative step of the central differences; second derivatives use a wider
# stencil since a 1e-6 second difference loses ten digits to rounding
FD_STEP = 1e-6
FD_STEP2 = 1e-4


@dataclass
class HypothesisRecord:
    identifier: str
    margin: float
    witness: dict | None
    passed: bool
    note: str = ""


@dataclass
class AssumptionReport:
    suite: str
    constants: dict
    tolerance: float
    samples: int
    records: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def failures(self) -> list:
        return [r for r in self.records if not r.passed]

    def __getitem__(self, identifier) -> HypothesisRecord:
        for r in self.records:
            if r.identifier == identifier:
                return r
        raise KeyError(identifier)

    def identifiers(self) -> list:
        return [r.identifier for r in self.records]


# sampling -------------------------------------------------------------------


def _smooth_field(grid, rng, amplitude, modes=3):
    """Random trigonometric field with wavenumbers up to ``modes``."""
    x = grid.coords
    out = np.zeros(grid.size)
    for _ in range(2 * modes):
        k = rng.integers(-modes, modes + 1, size=grid.dim)
        phase = rng.uniform(0, 2 * math.pi)
        out += rng.standard_normal() * np.cos(2 * math.pi * x @ k + phase)
    scale = np.max(np.abs(out))
    return amplitude * out / scale if scale > 0 else out


@dataclass
class _Batch:
    field_index: int
    ctx: object
    energy: float
    nodes: np.ndarray
    x: np.ndarray
    p: np.ndarray
    mx: np.ndarray


def _draw(model, grid, samples, p_radius, n_fields, amplitudes, rng, zero_velocity=False):
    m_amp, v_amp = amplitudes
    per = np.full(n_fields, samples // n_fields)
    per[: samples % n_fields] += 1
    batches = []
    for i in range(n_fields):
        m = np.exp(_smooth_field(grid, rng, m_amp))
        m /= grid.weight * m.sum()
        if zero_velocity:
            V = np.zeros((grid.size, grid.dim))
        else:
            V = np.stack([_smooth_field(grid, rng, v_amp) for _ in range(grid.dim)], axis=1)
        ctx = model.context(grid, m, V)
        energy = float(grid.weight * np.einsum("kd,kd,k->", V, V, m))
        k = int(per[i])
        nodes = rng.integers(grid.size, size=k)
        direction = rng.standard_normal((k, grid.dim))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
        radius = p_radius * rng.uniform(size=(k, 1)) ** (1.0 / grid.dim)
        batches.append(_Batch(i, ctx, energy, nodes, grid.coords[nodes], direction * radius, m[nodes]))
    return batches


def _x_step(x, j, s):
    e = np.zeros_like(x)
    e[:, j] = s * np.maximum(1.0, np.abs(x[:, j]))
    return e


def _grad_x(f, x):
    """Central difference gradient in x of f(x) -> (K, ...)."""
    cols = []
    for j in range(x.shape[1]):
        e = _x_step(x, j, FD_STEP)
        cols.append((f(x + e) - f(x - e)) / (2 * e[:, j].reshape((-1,) + (1,) * (f(x).ndim - 1))))
    return np.stack(cols, axis=-1)


def _hess_x(f, x):
    d = x.shape[1]
    out = np.empty((x.shape[0], d, d))
    f0 = f(x)
    for i in range(d):
        ei = _x_step(x, i, FD_STEP2)
        for j in range(i, d):
            if i == j:
                val = (f(x + ei) - 2 * f0 + f(x - ei)) / ei[:, i] ** 2
            else:
                ej = _x_step(x, j, FD_STEP2)
                val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * ei[:, i] * ej[:, j])
            out[:, i, j] = out[:, j, i] = val
    return out


def _fro(M):
    return np.sqrt(np.sum(M.reshape(len(M), -1) ** 2, axis=1))


def _min_eig(M):
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, 1, 2)))[:, 0]


class _Collector:
    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.worst = {}
        self.order = []
        self.notes = {}

    def add(self, ident, margin, batch, extra=None):
        margin = np.broadcast_to(np.asarray(margin, dtype=float), (len(batch.x),))
        if ident not in self.worst:
            self.order.append(ident)
            self.worst[ident] = (math.inf, None)
        if margin.size == 0:
            return
        bad = ~np.isfinite(margin)
        j = int(np.flatnonzero(bad)[0]) if bad.any() else int(np.argmin(margin))
        value = -math.inf if bad.any() else float(margin[j])
        if value < self.worst[ident][0]:
            witness = {
                "field": batch.field_index,
                "node": int(batch.nodes[j]),
                "x": batch.x[j].tolist(),
                "p": batch.p[j].tolist(),
                "m": float(batch.mx[j]),
                "int_V2_dm": batch.energy,
            }
            if extra is not None:
                witness.update(extra)
            self.worst[ident] = (value, witness)

    def scalar(self, ident, value, note=""):
        self.order.append(ident)
        self.worst[ident] = (float(value), None)
        if note:
            self.notes[ident] = note

    def records(self):
        out = []
        for ident in self.order:
            margin, witness = self.worst[ident]
            out.append(HypothesisRecord(ident, margin, witness, margin >= -self.tolerance, self.notes.get(ident, "")))
        return out


# suites ----------------------------------------------------------------------


def _suite_a(model, batches, k, col):
    C, c, delta, kappa, beta = k["C"], k["c"], k["delta"], k["kappa"], k["growth_beta"]
    for b in batches:
        x, p, mx, ctx = b.x, b.p, b.mx, b.ctx
        dE = delta * b.energy
        H = model.value(x, p, mx, ctx)
        g = model.coupling.g(mx)
        H0 = model.h0(x, p, mx, ctx)
        Dp = model.grad_p(x, p, mx, ctx)
        pp = np.einsum("kd,kd->k", p, p)
        hat = lambda y: model.value(y, p, mx, ctx) + g  # noqa: E731
        Hx = _grad_x(hat, x)
        Hxx = _hess_x(hat, x)
        Hxp = _grad_x(lambda y: model.grad_p(y, p, mx, ctx), x)
        col.add("A1", C - np.abs(H - H0 + g), b)
        col.add("A2", model.coupling.dg(mx), b)
        col.add("A3", C + C * H0 + dE - pp, b)
        finite = np.isfinite(H) & np.all(np.isfinite(Hx), axis=1) & np.all(np.isfinite(Hxp.reshape(len(x), -1)), axis=1)
        col.add("A4", np.where(finite, 0.0, -np.inf), b)
        L = -H + np.einsum("kd,kd->k", p, Dp)
        col.add("A5", L - (c * H0 + g - C - dE), b)
        col.add("A6", C + C * H0 + dE - np.einsum("kd,kd->k", Dp, Dp), b)
        col.add("A8", _min_eig(model.hess_pp(x, p, mx, ctx)) - kappa, b)
        col.add("A9", C + C * H0 + dE - _fro(Hxx), b)
        col.add("A10", C + C * H0 + dE - _fro(Hxp) ** 2, b)
        col.add("A11", C + C * np.sqrt(pp) ** beta - np.linalg.norm(Hx, axis=1), b)
    if k.get("delta0") is None:
        col.scalar("A7", delta, "delta0 not supplied; only delta >= 0 checked")
    else:
        col.scalar("A7", min(delta, k["delta0"] - delta))
    col.scalar("A11:beta", min(beta, 2.0 - beta) if beta < 2.0 else -math.inf, "0 <= growth_beta < 2")


def _suite_d(model, batches, k, col):
    C, c, sigma, beta = k["C"], k["c"], k["sigma"], k["growth_beta"]
    for b in batches:
        x, p, mx, ctx = b.x, b.p, b.mx, b.ctx  # ctx carries V = 0, so H_0 = h
        h = model.h0(x, p, mx, ctx)
        Dp = model.grad_p(x, p, mx, ctx)
        pp = np.einsum("kd,kd->k", p, p)
        hx_fun = lambda y: model.h0(y, p, mx, ctx)  # noqa: E731
        hx = _grad_x(hx_fun, x)
        hxx = _hess_x(hx_fun, x)
        hxp = _grad_x(lambda y: model.grad_p(y, p, mx, ctx), x)
        finite = np.isfinite(h) & np.all(np.isfinite(hx), axis=1)
        col.add("D1", np.where(finite, 0.0, -np.inf), b)
        col.add("D2", C + C * np.abs(h) - pp, b)
        col.add("D3", np.einsum("kd,kd->k", p, Dp) - h - (c * h - C), b)
        col.add("D4", C + C * h - np.einsum("kd,kd->k", Dp, Dp), b)
        col.add("D5", _min_eig(model.hess_pp(x, p, mx, ctx)) - sigma, b)
        col.add("D6", C + C * h - np.maximum(_fro(hxx), _fro(hxp) ** 2), b)
        col.add("D7", C + C * pp - h, b)
        col.add("D8", C + C * np.sqrt(pp) ** beta - np.linalg.norm(hx, axis=1), b)


def _suite_h(model, batches, k, col):
    C, eps, amin, kappa = k["C"], k["epsilon"], k["alpha_min"], k["kappa"]
    for b in batches:
        x, p, mx, ctx = b.x, b.p, b.mx, b.ctx
        bound = C + eps * b.energy
        d = x.shape[1]

        def G(y, q=p):
            return model.h0(y, q, mx, ctx) - 0.5 * model.kinetic(y) * np.einsum("kd,kd->k", q, q)

        def DpG(y):
            return model.grad_p(y, p, mx, ctx) - model.kinetic(y)[:, None] * p

        a = model.kinetic(x)
        col.add("H1:kinetic", a - amin, b)
        col.add("H1:G0", bound - np.abs(G(x, np.zeros_like(p))), b)
        col.add("H1:DpG", bound - np.einsum("kd,kd->k", DpG(x), DpG(x)), b)
        col.add("H1:DxG", bound - np.linalg.norm(_grad_x(G, x), axis=1), b)
        Gpp = model.hess_pp(x, p, mx, ctx) - a[:, None, None] * np.eye(d)[None]
        col.add("H2:DxpG", bound - _fro(_grad_x(DpG, x)) ** 2, b)
        col.add("H2:DxxG", bound - _fro(_hess_x(G, x)), b)
        col.add("H2:DppG", bound - _fro(Gpp), b)
        col.add("H2:kappa", _min_eig(model.hess_pp(x, p, mx, ctx)) - kappa, b)


def _suite_c(model, batches, k, col):
    sig, eta = math.inf, math.inf
    cache = []
    for b in batches:
        eig = _min_eig(model.hess_pp(b.x, b.p, b.mx, b.ctx))
        gp = model.coupling.dg(b.mx)
        sig, eta = min(sig, float(eig.min())), min(eta, float(gp.min()))
        cache.append((b, eig, gp))
    theta = k.get("theta")
    if theta is None:
        theta = min(min(1.0, sig) / 2.0, eta / 2.0)
    k["theta"] = theta
    for b, eig, gp in cache:
        col.add("C1", np.minimum(eig, gp) - theta, b)
    c = model.velocity_coupling
    if c is None:
        col.scalar("C2", -math.inf, "general velocity dependence: smallness threshold undefined")
    else:
        alpha0 = min(min(1.0, sig) / 26.0, eta / 27.0)
        col.scalar("C2", alpha0 - abs(c), f"alpha0 = {alpha0:.6g}")


_SUITE_FUNCS = {"A": _suite_a, "D": _suite_d, "H": _suite_h, "C": _suite_c}


def check_assumptions(
    model: HamiltonianModel,
    suite: str,
    grid: TorusGrid | None = None,
    constants: dict | None = None,
    samples: int = 10_000,
    p_radius: float = 5.0,
    n_fields: int = 8,
    amplitudes=(0.5, 1.0),
    seed: int = 0,
    tolerance: float = 1e-10,
) -> AssumptionReport:
    """Sample one hypothesis suite and report the worst margin of each inequality.

    ``amplitudes`` bounds the log-density and velocity test fields.  Unknown
    constant names raise ``ValueError``.
    """
    if suite not in _SUITE_FUNCS:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    if samples < 1 or n_fields < 1:
        raise ValueError("samples and n_fields must be positive")
    k = dict(DEFAULT_CONSTANTS[suite])
    for key, value in (constants or {}).items():
        if key not in k:
            raise ValueError(f"unknown constant {key!r} for suite {suite}; expected one of {sorted(k)}")
        k[key] = value
    dim = getattr(model, "dim", None) or getattr(getattr(model, "base", None), "dim", 1)
    grid = grid or TorusGrid(dim, 16)
    rng = np.random.default_rng(seed)
    batches = _draw(model, grid, samples, p_radius, min(n_fields, samples), amplitudes, rng, zero_velocity=suite == "D")
    col = _Collector(tolerance)
    _SUITE_FUNCS[suite](model, batches, k, col)
    return AssumptionReport(suite, k, tolerance, samples, col.records())
