import math

import pytest

from extmfg import check_assumptions, quadratic_log, quadratic_power, special_aniso, velocity_coupled


def test_strongly_convex_margin_is_exactly_zero():
    rep = check_assumptions(quadratic_log(1, ["cos 1 1.0"]), "D", samples=500, constants={"sigma": 1.0})
    assert rep["D5"].margin == 0.0 and rep["D5"].passed


def test_quadratic_log_satisfies_growth_suites():
    for suite in ("A", "D"):
        rep = check_assumptions(quadratic_log(2, ["cos 1,0 0.2"]), suite, samples=2000, constants={"C": 50.0})
        assert rep.passed, [(r.identifier, r.margin) for r in rep.failures]


def test_failure_carries_witness():
    rep = check_assumptions(quadratic_log(1), "D", samples=500, constants={"sigma": 1.5})
    rec = rep["D5"]
    assert not rec.passed and rec.margin == pytest.approx(-0.5)
    assert set(rec.witness) >= {"node", "x", "p", "m"}
    assert rec in rep.failures


def test_unknown_constant_and_suite():
    with pytest.raises(ValueError, match="beta"):
        check_assumptions(quadratic_log(1), "A", samples=10, constants={"beta": 1.0})
    with pytest.raises(ValueError):
        check_assumptions(quadratic_log(1), "Z", samples=10)
    with pytest.raises(KeyError):
        check_assumptions(quadratic_log(1), "D", samples=10)["A1"]


def test_seeded_runs_are_deterministic():
    model = special_aniso(1, kinetic=["cos 1 0.3"], drift=[["sin 1 0.2"]], alpha=0.1)
    a = check_assumptions(model, "H", samples=300, seed=7)
    b = check_assumptions(model, "H", samples=300, seed=7)
    assert [(r.identifier, r.margin) for r in a.records] == [(r.identifier, r.margin) for r in b.records]
    assert a.identifiers()[0] == "H1:kinetic"


def test_kinetic_floor():
    model = special_aniso(1, kinetic=["cos 1 0.3"], alpha=0.0)
    rep = check_assumptions(model, "H", samples=2000, constants={"alpha_min": 0.5, "kappa": 0.5, "C": 10.0})
    assert rep["H1:kinetic"].margin == pytest.approx(0.2, abs=1e-3)
    assert rep.passed


def test_smallness_threshold():
    ok = check_assumptions(velocity_coupled(1, 0.01), "C", samples=500)
    assert ok["C2"].passed and ok["C1"].passed
    bad = check_assumptions(velocity_coupled(1, 0.5), "C", samples=500)
    assert not bad["C2"].passed and "alpha0" in bad["C2"].note


def test_power_growth_exponent():
    rep = check_assumptions(quadratic_power(1, 2.0), "A", samples=200, constants={"growth_beta": 2.0})
    assert rep["A11:beta"].margin == -math.inf and not rep.passed
