import csv
import math

import numpy as np
import pytest
from conftest import random_density, smooth_field

from extmfg import (
    MFGState,
    TorusGrid,
    blend,
    continuation_run,
    diagnostics_report,
    energy_identity_gap,
    monotonicity_form,
    multiplier_identity_gaps,
    norm_panel,
    quadratic_log,
    quadratic_power,
    velocity_coupled,
)
from extmfg.diagnostics import (
    DiagnosticsOptions,
    fp_residual,
    make_step_diagnostics,
    report_keys,
    sample_monotonicity,
    write_report_csv,
)
from extmfg.torus import integrate_against


def _state(grid, rng, V=None):
    V = np.zeros((grid.size, grid.dim)) if V is None else V
    return MFGState(grid, smooth_field(grid, rng, 0.3), random_density(grid, rng), V, 0.2)


def test_report_key_order():
    keys = report_keys(quadratic_power(1, 2.0))
    assert keys[:3] == ["hbar", "energy_gap", "energy_gap_rel"]
    assert "mr_multiplier_gap(3)" in keys and keys[-1] == "monotonicity_margin"
    assert "mr_multiplier_gap(3)" not in report_keys(quadratic_log(1))


def test_multiplier_gap_is_tested_fp_residual():
    rng = np.random.default_rng(0)
    grid = TorusGrid(2, 8)
    V = rng.standard_normal((grid.size, 2))
    state = _state(grid, rng, V)
    gaps = multiplier_identity_gaps(grid, state, exponents=(2.0,), log_powers=(3.0,))
    r = fp_residual(grid, state)
    assert gaps["ln_m"] == pytest.approx(integrate_against(grid, np.log(state.m), r), abs=1e-12)
    assert gaps["m^2"] == pytest.approx(integrate_against(grid, state.m**2, r), abs=1e-12)
    assert gaps["|ln_m|^3"] == pytest.approx(integrate_against(grid, np.abs(np.log(state.m)) ** 3, r), abs=1e-12)


def test_identities_hold_at_solution():
    grid = TorusGrid(1, 64)
    model = quadratic_power(1, 0.5, ["cos 1 0.2"])
    state, _ = continuation_run(model, grid)
    assert abs(energy_identity_gap(model, grid, state)) <= 1e-11
    gaps = multiplier_identity_gaps(grid, state, relative=True)
    assert max(abs(v) for v in gaps.values()) <= 1e-9


def test_energy_gap_detects_wrong_hbar():
    grid = TorusGrid(1, 32)
    model = quadratic_log(1, ["cos 1 0.2"])
    state, _ = continuation_run(model, grid)
    shifted = MFGState(grid, state.u, state.m, state.V, state.Hbar + 1e-3)
    assert energy_identity_gap(model, grid, shifted) == pytest.approx(1e-3, rel=1e-9)


def test_ln_m_h1_norm_of_a_mode():
    grid = TorusGrid(1, 128)
    x = grid.coords[:, 0]
    m = np.exp(np.cos(2 * np.pi * x))
    m /= grid.weight * m.sum()
    state = MFGState(grid, np.zeros(grid.size), m, np.zeros((grid.size, 1)), 0.0)
    panel = norm_panel(quadratic_log(1), grid, state)
    # mean-free convention: ||cos||^2 + ||D cos||^2 = 1/2 + 2 pi^2
    assert panel["ln_m_H1"] ** 2 == pytest.approx(0.5 + 2 * math.pi**2, rel=1e-3)
    assert panel["min_m"] == pytest.approx(m.min()) and panel["inv_m_Linf"] == pytest.approx(1 / m.min())


def test_oscillation_and_lipschitz_for_smooth_fields():
    rng = np.random.default_rng(2)
    grid = TorusGrid(2, 32)
    state = _state(grid, rng)
    panel = norm_panel(quadratic_log(2), grid, state)
    assert panel["osc_u"] <= panel["lip_u"] * grid.dim / 2 * 1.05


def test_h0_form_at_lambda_zero():
    rng = np.random.default_rng(3)
    grid = TorusGrid(1, 16)
    state = _state(grid, rng, rng.standard_normal((16, 1)))
    Q, f, W = rng.standard_normal((16, 1)), rng.standard_normal(16), rng.standard_normal((16, 1))
    res = monotonicity_form(blend(velocity_coupled(1, 0.3), 0.0), grid, state, Q, f, W, theta=0.25)
    want = grid.weight * np.sum(state.m * Q[:, 0] ** 2 + f**2 / state.m)
    assert res.value == pytest.approx(want, abs=1e-13)
    R = W - Q
    margin = want - 0.25 * (integrate_against(grid, Q[:, 0] ** 2, state.m) + grid.weight * f @ f)
    margin += 12 * integrate_against(grid, R[:, 0] ** 2, state.m)
    assert res.margin == pytest.approx(margin, abs=1e-12)
    assert np.allclose(res.defect, R)


def test_monotonicity_margin_turns_negative_for_large_alpha():
    grid = TorusGrid(1, 32)
    state, _ = continuation_run(velocity_coupled(1, 0.02, ["cos 1 0.1"]), grid)
    small = sample_monotonicity(velocity_coupled(1, 0.02), grid, state, samples=30)
    assert small > 0
    # the form is quadratic in the actions, so a huge coupling must break coercivity
    huge = sample_monotonicity(velocity_coupled(1, 50.0), grid, state, samples=30, c_r=0.0)
    assert huge < 0


def test_step_callback_flags_negative_margin():
    grid = TorusGrid(1, 16)
    run = make_step_diagnostics(DiagnosticsOptions(monotonicity_samples=5, c_r=-100.0))
    report, flags = run(quadratic_log(1), grid, MFGState(grid, np.zeros(16), np.ones(16), np.zeros((16, 1)), 0.0))
    assert list(report) == report_keys(quadratic_log(1))
    assert flags == ["monotonicity margin negative"]


def test_csv_round_trip(tmp_path):
    grid = TorusGrid(1, 32)
    model = quadratic_log(1, ["cos 1 0.1"])
    state, _ = continuation_run(model, grid)
    report = diagnostics_report(model, grid, state)
    path = tmp_path / "r.csv"
    write_report_csv(path, [report], report_keys(model))
    with open(path) as fh:
        header, row = list(csv.reader(fh))
    assert header == report_keys(model)
    assert [float(v) for v in row] == list(report.values())
