"""Command line entry point: solve, diagnose, adjoint, check-assumptions, sweep.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure
(the partial trace is still written).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .adjoint import FrozenHamiltonian, evolve_adjoint, oscillation_bound_panel, representation_check
from .assumptions import check_assumptions
from .config import RunConfig, describe_defaults, load_config
from .diagnostics import DiagnosticsOptions, diagnostics_report, format_float, make_step_diagnostics, report_keys, write_report_csv
from .errors import ConfigError, ContinuationError, MFGError
from .hamiltonians import blend
from .io import read_checkpoint, write_checkpoint, write_field
from .solver import continuation_run

logger = logging.getLogger("extmfg")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
TRACE_HEAD = ["step", "lambda", "newton_iterations", "residual"]


def _options(cfg: RunConfig) -> DiagnosticsOptions:
    d = cfg.diagnostics
    return DiagnosticsOptions(
        exponents=tuple(float(r) for r in d["exponents"]),
        monotonicity_samples=d["monotonicity_samples"],
        theta=None if d["theta"] < 0 else d["theta"],
        c_r=d["c_r"],
        seed=d["seed"],
    )


def trace_rows(trace, keys, prefix=()):
    rows = []
    for i, e in enumerate(trace.entries, 1):
        row = list(prefix) + [i, format_float(e.lam), e.iterations, format_float(e.residual)]
        row += [format_float(e.diagnostics[k]) if k in e.diagnostics else "" for k in keys]
        row.append(";".join(e.flags))
        rows.append(row)
    return rows


def _write_csv(path, header, rows, footer=()):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        for line in footer:
            fh.write(line + "\n")


def _solve(cfg: RunConfig):
    """Run continuation; returns (state or None, trace, keys, error message)."""
    grid = cfg.make_grid()
    model = cfg.make_model(grid)
    options = _options(cfg)
    callback = make_step_diagnostics(options) if cfg.diagnostics["per_step"] else None
    keys = report_keys(model, options) if callback else []
    try:
        state, trace = continuation_run(model, grid, cfg.continuation_config(), diagnostics=callback)
    except ContinuationError as exc:
        return None, exc.trace, keys, str(exc)
    return state, trace, keys, None


def _sweep_child(args):
    cfg, parameter, value = args
    cfg = _apply_sweep(cfg, parameter, value)
    state, trace, keys, err = _solve(cfg)
    return trace_rows(trace, keys, prefix=(format_float(float(value)),)), keys, err


def _apply_sweep(cfg, parameter, value):
    if parameter == "alpha":
        return cfg.with_override("model", "alpha", float(value))
    if parameter == "gamma":
        return cfg.with_override("model", "gamma", float(value))
    if parameter == "n":
        if float(value) != int(value):
            raise ConfigError(f"sweep value {value!r} is not an integer grid size", key="sweep.values")
        return cfg.with_override("grid", "n", int(value))
    raise ConfigError(f"unknown sweep parameter {parameter!r}; expected alpha, gamma or n", key="sweep.parameter")


# verbs ---------------------------------------------------------------------


def cmd_solve(cfg, args):
    state, trace, keys, err = _solve(cfg)
    _write_csv(cfg.path(args.out_dir, "trace"), TRACE_HEAD + keys + ["flags"], trace_rows(trace, keys))
    for note in trace.notes:
        logger.info(note)
    if err is not None:
        logger.error("solver failure: %s", err)
        return EXIT_SOLVER
    write_checkpoint(cfg.path(args.out_dir, "checkpoint"), state)
    model = blend(cfg.make_model(state.grid), 1.0)
    options = _options(cfg)
    report = diagnostics_report(model, state.grid, state, options)
    write_report_csv(cfg.path(args.out_dir, "report"), [report], report_keys(model, options))
    logger.info("solved in %d steps, Hbar = %.12g", len(trace), state.Hbar)
    return EXIT_OK


def _load_state(cfg, args):
    path = args.state or cfg.path(args.out_dir, "checkpoint")
    if not os.path.isabs(path) and args.state:
        path = os.path.join(args.out_dir, path)
    try:
        state = read_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    grid = cfg.make_grid()
    if state.grid != grid:
        raise ConfigError(f"checkpoint grid {state.grid} does not match config grid {grid}", key="grid")
    return state


def cmd_diagnose(cfg, args):
    state = _load_state(cfg, args)
    model = blend(cfg.make_model(state.grid), 1.0)
    options = _options(cfg)
    report = diagnostics_report(model, state.grid, state, options)
    write_report_csv(cfg.path(args.out_dir, "report"), [report], report_keys(model, options))
    return EXIT_OK


def cmd_adjoint(cfg, args):
    state = _load_state(cfg, args)
    a = cfg.adjoint
    x0 = a["x0"] if args.x0 is None else args.x0
    T = a["T"] if args.T is None else args.T
    steps = a["steps"] if args.steps is None else args.steps
    dump = a["dump_every"] if args.dump_every is None else args.dump_every
    if not 0 <= x0 < state.grid.size:
        raise ConfigError(f"x0 = {x0} is not a node index of the grid", key="adjoint.x0")
    model = cfg.make_model(state.grid)
    F = FrozenHamiltonian(model, state)
    run = evolve_adjoint(F, state.u, x0, T=T, K=steps, dump_every=dump, r=None if a["r"] < 0 else a["r"])
    gap = representation_check(F, state.u, run)
    panel = oscillation_bound_panel(F, state.u, run)
    rows = [[format_float(float(v)) for v in row] for row in run.rows()]
    footer = [f"# {k}={format_float(float(v))}" for k, v in panel.items()]
    footer.append(f"# representation_gap={format_float(gap)}")
    _write_csv(cfg.path(args.out_dir, "adjoint"), ["t", "mass", f"rho_L{run.q:g}", "int_Dw2_rho"], rows, footer)
    for k, rho in sorted(run.slices.items()):
        write_field(os.path.join(args.out_dir, f"{cfg.output['slices']}_{k:06d}.mfg"), state.grid, rho)
    return EXIT_OK


def cmd_check_assumptions(cfg, args):
    a = cfg.assumptions
    suite = args.suite or a["suite"]
    grid = cfg.make_grid()
    model = cfg.make_model(grid)
    try:
        report = check_assumptions(
            model,
            suite,
            grid=grid,
            constants=a["constants"],
            samples=a["samples"],
            p_radius=a["p_radius"],
            n_fields=a["n_fields"],
            amplitudes=(a["m_amplitude"], a["v_amplitude"]),
            seed=a["seed"],
            tolerance=a["tolerance"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc), key="assumptions") from exc
    rows = []
    for r in report.records:
        w = r.witness or {}
        rows.append([
            r.identifier, format_float(r.margin), "pass" if r.passed else "FAIL",
            w.get("node", ""), " ".join(format_float(v) for v in w.get("x", [])),
            " ".join(format_float(v) for v in w.get("p", [])),
            format_float(w["m"]) if "m" in w else "", r.note,
        ])
    _write_csv(
        cfg.path(args.out_dir, "assumptions"),
        ["hypothesis", "worst_margin", "status", "node", "x", "p", "m", "note"],
        rows,
    )
    for row in rows:
        print(f"{row[0]:<10} {row[2]:<5} {row[1]}")
    return EXIT_OK


def _workers(count):
    env = os.environ.get("MFG_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"MFG_THREADS must be an integer, got {env!r}") from exc
    return max(1, min(cap, count))


def cmd_sweep(cfg, args):
    parameter = args.param or cfg.sweep["parameter"]
    values = args.values if args.values is not None else cfg.sweep["values"]
    if not values:
        raise ConfigError("sweep needs at least one value", key="sweep.values")
    for v in values:
        _apply_sweep(cfg, parameter, v)
    jobs = [(cfg, parameter, v) for v in values]
    workers = _workers(len(jobs))
    if workers == 1:
        results = [_sweep_child(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_child, jobs))
    # the diagnostic keys can differ between runs (power exponents); use their union in order
    keys = []
    for _, ks, _ in results:
        keys += [k for k in ks if k not in keys]
    rows = []
    failed = False
    for (rows_i, ks, err), v in zip(results, values):
        if err is not None:
            failed = True
            logger.error("%s=%s failed: %s", parameter, v, err)
        for r in rows_i:
            head, diag, flags = r[:5], r[5:-1], r[-1]
            lookup = dict(zip(ks, diag))
            rows.append(head + [lookup.get(k, "") for k in keys] + [flags])
    _write_csv(cfg.path(args.out_dir, "sweep"), [parameter] + TRACE_HEAD + keys + ["flags"], rows)
    return EXIT_SOLVER if failed else EXIT_OK


VERBS = {
    "solve": cmd_solve,
    "diagnose": cmd_diagnose,
    "adjoint": cmd_adjoint,
    "check-assumptions": cmd_check_assumptions,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extmfg",
        description="Stationary extended mean-field games on the torus.",
        epilog="configuration keys and defaults:\n" + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--out-dir", default=".", help="directory for all outputs (default: .)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("config", help="TOML run configuration")
        if verb in ("diagnose", "adjoint"):
            p.add_argument("--state", help="checkpoint path (default: output.checkpoint in --out-dir)")
        if verb == "adjoint":
            p.add_argument("--x0", type=int, help="source node index")
            p.add_argument("--T", type=float, help="horizon")
            p.add_argument("--steps", type=int, help="implicit Euler steps")
            p.add_argument("--dump-every", type=int, help="dump every k-th density slice")
        if verb == "check-assumptions":
            p.add_argument("--suite", choices=["A", "D", "H", "C"])
        if verb == "sweep":
            p.add_argument("--param", choices=["alpha", "gamma", "n"])
            p.add_argument("--values", type=float, nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        cfg = load_config(args.config)
        return VERBS[args.verb](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MFGError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
