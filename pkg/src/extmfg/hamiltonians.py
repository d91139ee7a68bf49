"""Hamiltonian models, density couplings and the lambda-blended family.

All evaluation methods are vectorized over sample points: ``x`` has shape
(K, d), ``p`` has shape (K, d) and ``mx`` (the density at each point) has
shape (K,).  Nonlocal dependence on the density and velocity fields enters
through a :class:`ModelContext` built once per (m, V) pair.

The shipped families all have the structure

    H(x, p, m, V) = a(x)|p|^2/2 + b(x).p + W(x) + alpha p . int V m dy - g(m(x))

so that H_0 = H + g(m) exactly.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, SingularSystemError
from .torus import TorusGrid

__all__ = [
    "Coupling",
    "LogCoupling",
    "PowerCoupling",
    "FourierSeries",
    "ModelContext",
    "HamiltonianModel",
    "StructuredHamiltonian",
    "LambdaFamily",
    "blend",
    "quadratic_log",
    "quadratic_power",
    "special_aniso",
    "velocity_coupled",
    "make_model",
    "FAMILIES",
]

TWO_PI = 2.0 * math.pi


# couplings -----------------------------------------------------------------


class Coupling(abc.ABC):
    """Local density cost g and its derivatives."""

    name = "custom"

    def _check(self, m):
        m = np.asarray(m, dtype=float)
        bad = np.flatnonzero(~(m > 0))
        if bad.size:
            j = int(bad[0])
            raise DomainError(f"nonpositive density {m.flat[j]!r} at node {j}", node=j)
        return m

    @abc.abstractmethod
    def g(self, m): ...

    @abc.abstractmethod
    def dg(self, m): ...

    def at_one(self) -> float:
        return float(self.g(np.ones(1))[0])


class LogCoupling(Coupling):
    name = "log"

    def g(self, m):
        return np.log(self._check(m))

    def dg(self, m):
        return 1.0 / self._check(m)

    def __repr__(self):
        return "LogCoupling()"


class PowerCoupling(Coupling):
    name = "power"

    def __init__(self, gamma: float):
        if not gamma > 0:
            raise ValueError(f"power coupling needs gamma > 0, got {gamma}")
        self.gamma = float(gamma)

    def g(self, m):
        return self._check(m) ** self.gamma

    def dg(self, m):
        return self.gamma * self._check(m) ** (self.gamma - 1.0)

    def __repr__(self):
        return f"PowerCoupling(gamma={self.gamma})"


# coefficient fields --------------------------------------------------------


@dataclass(frozen=True)
class FourierSeries:
    """Real trigonometric series sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x)."""

    dim: int
    wavevectors: np.ndarray = field(repr=False)
    cos_amp: np.ndarray = field(repr=False)
    sin_amp: np.ndarray = field(repr=False)
    constant: float = 0.0

    @classmethod
    def zero(cls, dim: int) -> FourierSeries:
        return cls(dim, np.zeros((0, dim)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_terms(cls, dim: int, terms, constant=0.0) -> FourierSeries:
        """Build from ``(kind, wavevector, amplitude)`` triples, kind in {cos, sin}."""
        ks, ca, sa = [], [], []
        for kind, k, amp in terms:
            k = [float(v) for v in np.atleast_1d(k)]
            if len(k) > dim:
                raise ValueError(f"wavevector {k} has more than {dim} components")
            k = k + [0.0] * (dim - len(k))
            ks.append(k)
            if kind == "cos":
                ca.append(float(amp))
                sa.append(0.0)
            elif kind == "sin":
                ca.append(0.0)
                sa.append(float(amp))
            else:
                raise ValueError(f"unknown series term kind {kind!r}")
        return cls(dim, np.array(ks, dtype=float).reshape(-1, dim), np.array(ca), np.array(sa), float(constant))

    @classmethod
    def parse(cls, dim: int, lines, constant=0.0) -> FourierSeries:
        """Parse lines of the form ``cos k1,...,kd amplitude``."""
        terms = []
        for line in lines:
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"cannot parse series term {line!r}; expected 'cos k1,...,kd amplitude'")
            kind, kvec, amp = parts
            terms.append((kind, [float(v) for v in kvec.split(",")], float(amp)))
        return cls.from_terms(dim, terms, constant)

    @classmethod
    def from_field(cls, grid: TorusGrid, values) -> FourierSeries:
        """Trigonometric interpolant of tabulated nodal values."""
        F = np.asarray(values, dtype=float).reshape(grid.shape)
        c = np.fft.fftn(F) / grid.size
        freqs = np.meshgrid(*([np.fft.fftfreq(grid.n, d=1.0 / grid.n)] * grid.dim), indexing="ij")
        ks = np.stack([f.ravel() for f in freqs], axis=1)
        c = c.ravel()
        keep = np.abs(c) > 1e-15 * max(np.abs(c).max(), 1e-300)
        zero = np.all(ks == 0, axis=1)
        const = float(c[zero].real.sum())
        keep &= ~zero
        return cls(grid.dim, ks[keep], c[keep].real.copy(), -c[keep].imag.copy(), const)

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0 and not np.any(self.cos_amp) and not np.any(self.sin_amp)

    def scaled(self, s: float) -> FourierSeries:
        return FourierSeries(self.dim, self.wavevectors, s * self.cos_amp, s * self.sin_amp, s * self.constant)

    def _phase(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return TWO_PI * x @ self.wavevectors.T

    def value(self, x) -> np.ndarray:
        th = self._phase(x)
        return self.constant + np.cos(th) @ self.cos_amp + np.sin(th) @ self.sin_amp

    def grad(self, x) -> np.ndarray:
        th = self._phase(x)
        coef = -np.sin(th) * self.cos_amp + np.cos(th) * self.sin_amp
        return TWO_PI * coef @ self.wavevectors

    def hess(self, x) -> np.ndarray:
        th = self._phase(x)
        coef = -(np.cos(th) * self.cos_amp + np.sin(th) * self.sin_amp)
        kk = np.einsum("ti,tj->tij", self.wavevectors, self.wavevectors)
        return TWO_PI**2 * np.einsum("kt,tij->kij", coef, kk)


# context -------------------------------------------------------------------


@dataclass(frozen=True)
class ModelContext:
    """Nonlocal data of a fixed (m, V) pair; ``moment`` is int V m dy."""

    grid: TorusGrid
    m: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)

    @cached_property
    def moment(self) -> np.ndarray:
        return self.grid.weight * (self.V.T @ self.m)

    @property
    def weight(self) -> float:
        return self.grid.weight


# models --------------------------------------------------------------------


class HamiltonianModel(abc.ABC):
    """Evaluation interface shared by all Hamiltonians.

    ``velocity_coupling`` is the scalar c when H depends on V only through
    c p . int V m dy; it is ``None`` for models with a general velocity
    dependence, in which case the solver falls back to fixed-point
    iteration and dense resolvents.
    """

    family = "abstract"
    coupling: Coupling
    velocity_coupling: float | None = 0.0

    def context(self, grid: TorusGrid, m, V=None) -> ModelContext:
        m = np.asarray(m, dtype=float)
        V = np.zeros((grid.size, grid.dim)) if V is None else np.asarray(V, dtype=float)
        return ModelContext(grid, m, V)

    @property
    def depends_on_velocity(self) -> bool:
        return self.velocity_coupling is None or self.velocity_coupling != 0.0

    @property
    def is_local(self) -> bool:
        """True when D_pH involves neither nonlocal density nor velocity terms."""
        return not self.depends_on_velocity

    @abc.abstractmethod
    def value(self, x, p, mx, ctx): ...

    @abc.abstractmethod
    def grad_p(self, x, p, mx, ctx): ...

    @abc.abstractmethod
    def hess_pp(self, x, p, mx, ctx): ...

    @abc.abstractmethod
    def hess_px(self, x, p, mx, ctx): ...

    def h0(self, x, p, mx, ctx):
        """H_0 = H + g(m); the discrepancy allowed by the quasi-variational bound is zero."""
        return self.value(x, p, mx, ctx) + self.coupling.g(mx)

    def kinetic(self, x):
        """Coefficient a(x) of |p|^2/2 in H_0, used by the special-family checks."""
        return np.ones(np.asarray(x).reshape(len(x), -1).shape[0])

    # Frechet actions; zero for local, velocity-independent models.

    def a1(self, f, x, p, ctx):
        f = np.asarray(f, dtype=float)
        return np.zeros((len(p),) + f.shape[1:])

    def b1(self, f, x, p, ctx):
        f = np.asarray(f, dtype=float)
        return np.zeros((len(p), ctx.grid.dim) + f.shape[1:])

    def a2(self, W, x, p, ctx):
        W = np.asarray(W, dtype=float)
        return np.zeros((len(p),) + W.shape[2:])

    def b2(self, W, x, p, ctx):
        W = np.asarray(W, dtype=float)
        return np.zeros((len(p), ctx.grid.dim) + W.shape[2:])

    def velocity_resolvent(self, Wt, x, P, ctx):
        """Apply (Id - B2)^-1 to ``Wt`` of shape (N, d) or (N, d, K)."""
        Wt = np.asarray(Wt, dtype=float)
        c = self.velocity_coupling
        if c == 0.0:
            return Wt.copy()
        if c is not None:
            mass = ctx.weight * float(np.sum(ctx.m))
            if abs(1.0 - c * mass) < 1e-14:
                raise SingularSystemError("Id - B2 is singular (velocity coupling times mass equals 1)")
            M = ctx.weight * np.einsum("nd...,n->d...", Wt, ctx.m)
            return Wt + (c / (1.0 - c * mass)) * M[None]
        N, d = ctx.grid.size, ctx.grid.dim
        eye = np.eye(N * d).reshape(N, d, N * d)
        B = self.b2(eye, x, P, ctx).reshape(N * d, N * d)
        rhs = Wt.reshape(N * d, -1)
        try:
            sol = np.linalg.solve(np.eye(N * d) - B, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"Id - B2 is singular: {exc}") from exc
        return sol.reshape(Wt.shape)


class StructuredHamiltonian(HamiltonianModel):
    """a(x)|p|^2/2 + b(x).p + W(x) + alpha p . int V m dy - g(m)."""

    def __init__(
        self,
        family: str,
        dim: int,
        coupling: Coupling,
        potential: FourierSeries | None = None,
        kinetic: FourierSeries | None = None,
        drift: list[FourierSeries] | None = None,
        alpha: float = 0.0,
    ):
        self.family = family
        self.dim = dim
        self.coupling = coupling
        self.potential = potential if potential is not None else FourierSeries.zero(dim)
        if kinetic is None:
            kinetic = FourierSeries(dim, np.zeros((0, dim)), np.zeros(0), np.zeros(0), 1.0)
        self.kinetic_series = kinetic
        self.drift = drift
        self.alpha = float(alpha)
        self.velocity_coupling = self.alpha

    def __repr__(self):
        return f"StructuredHamiltonian(family={self.family!r}, dim={self.dim}, coupling={self.coupling!r}, alpha={self.alpha})"

    def kinetic(self, x):
        return self.kinetic_series.value(x)

    def _drift(self, x):
        if self.drift is None:
            return 0.0
        return np.stack([b.value(x) for b in self.drift], axis=1)

    def value(self, x, p, mx, ctx):
        p = np.asarray(p, dtype=float)
        out = 0.5 * self.kinetic(x) * np.einsum("kd,kd->k", p, p) + self.potential.value(x)
        if self.drift is not None:
            out = out + np.einsum("kd,kd->k", self._drift(x), p)
        if self.alpha != 0.0:
            out = out + self.alpha * (p @ ctx.moment)
        return out - self.coupling.g(mx)

    def grad_p(self, x, p, mx, ctx):
        self.coupling._check(mx)
        out = self.kinetic(x)[:, None] * np.asarray(p, dtype=float)
        if self.drift is not None:
            out = out + self._drift(x)
        if self.alpha != 0.0:
            out = out + self.alpha * ctx.moment
        return out

    def hess_pp(self, x, p, mx, ctx):
        self.coupling._check(mx)
        a = self.kinetic(x)
        return a[:, None, None] * np.eye(self.dim)[None]

    def hess_px(self, x, p, mx, ctx):
        self.coupling._check(mx)
        out = np.einsum("ki,kj->kij", np.asarray(p, dtype=float), self.kinetic_series.grad(x))
        if self.drift is not None:
            out = out + np.stack([b.grad(x) for b in self.drift], axis=1)
        return out

    def a1(self, f, x, p, ctx):
        if self.alpha == 0.0:
            return super().a1(f, x, p, ctx)
        M = ctx.weight * np.einsum("nd,n...->d...", ctx.V, np.asarray(f, dtype=float))
        return self.alpha * np.einsum("kd,d...->k...", np.asarray(p, dtype=float), M)

    def b1(self, f, x, p, ctx):
        if self.alpha == 0.0:
            return super().b1(f, x, p, ctx)
        M = ctx.weight * np.einsum("nd,n...->d...", ctx.V, np.asarray(f, dtype=float))
        return np.broadcast_to(self.alpha * M, (len(p),) + M.shape).copy()

    def a2(self, W, x, p, ctx):
        if self.alpha == 0.0:
            return super().a2(W, x, p, ctx)
        M = ctx.weight * np.einsum("nd...,n->d...", np.asarray(W, dtype=float), ctx.m)
        return self.alpha * np.einsum("kd,d...->k...", np.asarray(p, dtype=float), M)

    def b2(self, W, x, p, ctx):
        if self.alpha == 0.0:
            return super().b2(W, x, p, ctx)
        M = ctx.weight * np.einsum("nd...,n->d...", np.asarray(W, dtype=float), ctx.m)
        return np.broadcast_to(self.alpha * M, (len(p),) + M.shape).copy()


class LambdaFamily(HamiltonianModel):
    """H_lam = lam H + (1 - lam)(|p|^2/2 - g(m))."""

    def __init__(self, base: HamiltonianModel, lam: float):
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        self.base = base
        self.lam = lam
        self.coupling = base.coupling
        self.family = base.family
        c = base.velocity_coupling
        self.velocity_coupling = None if c is None else lam * c

    def __repr__(self):
        return f"LambdaFamily({self.base!r}, lam={self.lam})"

    def _ref(self, p, mx):
        p = np.asarray(p, dtype=float)
        return 0.5 * np.einsum("kd,kd->k", p, p) - self.coupling.g(mx)

    def value(self, x, p, mx, ctx):
        return self.lam * self.base.value(x, p, mx, ctx) + (1.0 - self.lam) * self._ref(p, mx)

    def grad_p(self, x, p, mx, ctx):
        return self.lam * self.base.grad_p(x, p, mx, ctx) + (1.0 - self.lam) * np.asarray(p, dtype=float)

    def hess_pp(self, x, p, mx, ctx):
        d = np.asarray(p).shape[1]
        return self.lam * self.base.hess_pp(x, p, mx, ctx) + (1.0 - self.lam) * np.eye(d)[None]

    def hess_px(self, x, p, mx, ctx):
        return self.lam * self.base.hess_px(x, p, mx, ctx)

    def kinetic(self, x):
        return self.lam * self.base.kinetic(x) + (1.0 - self.lam)

    def a1(self, f, x, p, ctx):
        return self.lam * self.base.a1(f, x, p, ctx)

    def b1(self, f, x, p, ctx):
        return self.lam * self.base.b1(f, x, p, ctx)

    def a2(self, W, x, p, ctx):
        return self.lam * self.base.a2(W, x, p, ctx)

    def b2(self, W, x, p, ctx):
        return self.lam * self.base.b2(W, x, p, ctx)


def blend(model: HamiltonianModel, lam: float) -> LambdaFamily:
    """Continuation family member at parameter ``lam``."""
    return LambdaFamily(model, lam)


# families ------------------------------------------------------------------


def _series(dim, spec):
    if spec is None:
        return None
    if isinstance(spec, FourierSeries):
        return spec
    return FourierSeries.parse(dim, spec)


def quadratic_log(dim: int, potential=None) -> StructuredHamiltonian:
    return StructuredHamiltonian("quadratic_log", dim, LogCoupling(), _series(dim, potential))


def quadratic_power(dim: int, gamma: float, potential=None) -> StructuredHamiltonian:
    return StructuredHamiltonian("quadratic_power", dim, PowerCoupling(gamma), _series(dim, potential))


def special_aniso(
    dim: int,
    kinetic_base: float = 1.0,
    kinetic=None,
    drift=None,
    potential=None,
    coupling: Coupling | None = None,
    alpha: float = 0.0,
) -> StructuredHamiltonian:
    """alpha(x)|p|^2/2 + G with G = b(x).p + W(x) + alpha p . int V m."""
    k = _series(dim, kinetic) or FourierSeries.zero(dim)
    k = FourierSeries(dim, k.wavevectors, k.cos_amp, k.sin_amp, k.constant + float(kinetic_base))
    b = None if drift is None else [_series(dim, s) or FourierSeries.zero(dim) for s in drift]
    if b is not None and len(b) != dim:
        raise ValueError(f"drift needs {dim} components, got {len(b)}")
    return StructuredHamiltonian(
        "special_aniso", dim, coupling or LogCoupling(), _series(dim, potential), kinetic=k, drift=b, alpha=alpha
    )


def velocity_coupled(dim: int, alpha: float, potential=None, coupling: Coupling | None = None) -> StructuredHamiltonian:
    """h(x, p) + alpha p . int V m dy - g(m) with h = |p|^2/2 + W(x)."""
    return StructuredHamiltonian(
        "velocity_coupled", dim, coupling or LogCoupling(), _series(dim, potential), alpha=alpha
    )


FAMILIES = ("quadratic_log", "quadratic_power", "special_aniso", "velocity_coupled")


def make_model(family: str, dim: int, **params) -> StructuredHamiltonian:
    """Construct a shipped family by name."""
    if family == "quadratic_log":
        return quadratic_log(dim, params.get("potential"))
    if family == "quadratic_power":
        return quadratic_power(dim, params.get("gamma", 1.0), params.get("potential"))
    coupling = params.get("coupling")
    if family == "special_aniso":
        return special_aniso(
            dim,
            kinetic_base=params.get("kinetic_base", 1.0),
            kinetic=params.get("kinetic"),
            drift=params.get("drift"),
            potential=params.get("potential"),
            coupling=coupling,
            alpha=params.get("alpha", 0.0),
        )
    if family == "velocity_coupled":
        return velocity_coupled(dim, params.get("alpha", 0.0), params.get("potential"), coupling)
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
