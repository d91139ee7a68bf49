"""Strict TOML run configuration.

Every section and key is declared in :data:`SCHEMA` with its default; an
unknown or mistyped entry raises :class:`ConfigError` naming the key and
the line it appears on.
"""

from __future__ import annotations

import copy
import os
import re
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .hamiltonians import FourierSeries, LogCoupling, PowerCoupling, make_model
from .io import read_field
from .solver import ContinuationConfig
from .torus import TorusGrid

__all__ = ["SCHEMA", "RunConfig", "load_config", "parse_config", "describe_defaults"]

_NUM = (int, float)

# section -> key -> (default, accepted types, help)
SCHEMA: dict = {
    "grid": {
        "dim": (1, int, "torus dimension d (1, 2 or 3)"),
        "n": (64, int, "points per axis"),
    },
    "model": {
        "family": ("quadratic_log", str, "quadratic_log | quadratic_power | special_aniso | velocity_coupled"),
        "gamma": (1.0, _NUM, "power coupling exponent"),
        "coupling": ("log", str, "log | power (special_aniso, velocity_coupled)"),
        "alpha": (0.0, _NUM, "velocity coupling strength"),
        "kinetic_base": (1.0, _NUM, "constant part of a(x)"),
        "kinetic": ([], list, "cosine lines added to a(x)"),
        "drift": ([], list, "one list of cosine lines per drift component"),
        "potential": ([], list, "cosine lines 'cos k1,...,kd amplitude'"),
        "potential_file": ("", str, "MFGFIELD file with a tabulated potential"),
    },
    "continuation": {
        "lambda_step0": (0.1, _NUM, "initial lambda step"),
        "step_growth": (1.5, _NUM, "step growth after an accepted step"),
        "step_cap": (0.25, _NUM, "largest lambda step"),
        "max_halvings": (10, int, "consecutive step halvings before giving up"),
        "newton_tol": (1e-10, _NUM, "residual infinity-norm tolerance"),
        "max_newton_iters": (30, int, "Newton iterations per step"),
        "linear_solver": ("auto", str, "auto | direct | iterative"),
        "tau": (0.9, _NUM, "fraction-to-boundary factor"),
        "armijo_factor": (0.5, _NUM, "backtracking factor"),
        "max_backtracks": (30, int, "line-search backtracks"),
    },
    "diagnostics": {
        "per_step": (True, bool, "evaluate the panel at every accepted lambda"),
        "exponents": ([0.5, 1.0, 2.0, -1.0, -0.1], list, "r values of the m^r multiplier gaps"),
        "monotonicity_samples": (20, int, "random directions for the monotonicity margin"),
        "theta": (-1.0, _NUM, "coercivity constant; negative selects the constructive default"),
        "c_r": (12.0, _NUM, "defect weight in the monotonicity margin"),
        "seed": (0, int, "seed of the random directions"),
    },
    "adjoint": {
        "x0": (0, int, "source node index"),
        "T": (1.0, _NUM, "horizon"),
        "steps": (200, int, "implicit Euler steps"),
        "dump_every": (0, int, "dump every k-th density slice (0 = none)"),
        "r": (-1.0, _NUM, "norm exponent r; q = r/(r-1); negative selects d + 1"),
    },
    "assumptions": {
        "suite": ("A", str, "A | D | H | C"),
        "samples": (10000, int, "sample count"),
        "p_radius": (5.0, _NUM, "momentum ball radius"),
        "n_fields": (8, int, "random (m, V) field pairs"),
        "m_amplitude": (0.5, _NUM, "amplitude of ln m test fields"),
        "v_amplitude": (1.0, _NUM, "amplitude of velocity test fields"),
        "seed": (0, int, "sampler seed"),
        "tolerance": (1e-10, _NUM, "pass threshold on the worst margin"),
        "constants": ({}, dict, "suite constants, e.g. {C = 2.0, c = 0.5}"),
    },
    "sweep": {
        "parameter": ("alpha", str, "alpha | gamma | n"),
        "values": ([], list, "parameter values"),
    },
    "output": {
        "trace": ("trace.csv", str, "continuation trace CSV"),
        "checkpoint": ("state.mfg", str, "final state checkpoint"),
        "report": ("report.csv", str, "diagnostics report CSV"),
        "adjoint": ("adjoint.csv", str, "adjoint history CSV"),
        "slices": ("rho", str, "prefix of dumped adjoint slices"),
        "assumptions": ("assumptions.csv", str, "assumption report CSV"),
        "sweep": ("sweep.csv", str, "concatenated sweep traces"),
    },
}


def describe_defaults() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (default, _, text) in keys.items():
            lines.append(f"  {key} = {default!r}  # {text}")
    return "\n".join(lines)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    """Best-effort line number of ``key`` inside ``[section]``."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
    for i, raw in enumerate(text.splitlines(), 1):
        m = header.match(raw)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
            return i
    return None


@dataclass
class RunConfig:
    grid: dict
    model: dict
    continuation: dict
    diagnostics: dict
    adjoint: dict
    assumptions: dict
    sweep: dict
    output: dict
    source: str = ""
    base_dir: str = "."
    _text: str = field(default="", repr=False)

    def make_grid(self) -> TorusGrid:
        try:
            return TorusGrid(self.grid["dim"], self.grid["n"])
        except ValueError as exc:
            raise ConfigError(str(exc), key="grid", line=_line_of(self._text, "grid", None)) from exc

    def make_model(self, grid: TorusGrid | None = None):
        grid = grid or self.make_grid()
        sec = self.model
        dim = grid.dim
        try:
            if sec["potential_file"]:
                path = sec["potential_file"]
                if not os.path.isabs(path):
                    path = os.path.join(self.base_dir, path)
                fgrid, values = read_field(path)
                if fgrid.dim != dim:
                    raise ValueError(f"potential file has dim {fgrid.dim}, grid has dim {dim}")
                potential = FourierSeries.from_field(fgrid, values)
            else:
                potential = FourierSeries.parse(dim, sec["potential"])
            coupling = PowerCoupling(sec["gamma"]) if sec["coupling"] == "power" else LogCoupling()
            if sec["coupling"] not in ("log", "power"):
                raise ValueError(f"unknown coupling {sec['coupling']!r}")
            params = {"potential": potential, "gamma": sec["gamma"], "alpha": sec["alpha"], "coupling": coupling}
            if sec["family"] == "special_aniso":
                params["kinetic_base"] = sec["kinetic_base"]
                params["kinetic"] = sec["kinetic"] or None
                params["drift"] = sec["drift"] or None
            return make_model(sec["family"], dim, **params)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"invalid model section: {exc}", key="model", line=_line_of(self._text, "model", None)) from exc

    def continuation_config(self) -> ContinuationConfig:
        try:
            return ContinuationConfig(**self.continuation)
        except ValueError as exc:
            raise ConfigError(str(exc), key="continuation", line=_line_of(self._text, "continuation", None)) from exc

    def path(self, out_dir: str, key: str) -> str:
        return os.path.join(out_dir, self.output[key])

    def with_override(self, section: str, key: str, value) -> RunConfig:
        new = copy.deepcopy(self)
        getattr(new, section)[key] = value
        return new


def _check_type(value, types, section, key, text):
    if types == _NUM:
        ok, name = isinstance(value, _NUM) and not isinstance(value, bool), "a number"
    elif types is int:
        ok, name = isinstance(value, int) and not isinstance(value, bool), "an integer"
    else:
        ok, name = isinstance(value, types), f"of type {types.__name__}"
    if not ok:
        raise ConfigError(
            f"{section}.{key} must be {name}, got {type(value).__name__}",
            key=f"{section}.{key}",
            line=_line_of(text, section, key),
        )


def parse_config(text: str, source: str = "<string>", base_dir: str = ".") -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{source}: {exc}", line=int(m.group(1)) if m else None) from exc
    sections = {}
    for section, entries in data.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", key=section, line=_line_of(text, section, None))
        if not isinstance(entries, dict):
            raise ConfigError(f"{section} must be a table", key=section, line=_line_of(text, section, None))
    for section, keys in SCHEMA.items():
        entries = data.get(section, {})
        values = {k: copy.deepcopy(v[0]) for k, v in keys.items()}
        for key, value in entries.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}", line=_line_of(text, section, key))
            _check_type(value, keys[key][1], section, key, text)
            values[key] = float(value) if keys[key][1] == _NUM else value
        sections[section] = values
    return RunConfig(**sections, source=source, base_dir=base_dir, _text=text)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=os.fspath(path), base_dir=os.path.dirname(os.path.abspath(path)))
