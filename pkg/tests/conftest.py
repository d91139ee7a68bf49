import numpy as np
import pytest

from extmfg import TorusGrid, continuation_run, quadratic_log

ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Store one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        outcomes = ACCEPTANCE[crit]
        ok = all(o for o, _ in outcomes)
        details = "; ".join(d for _, d in outcomes if d)
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {details}")


@pytest.fixture(scope="session")
def bench():
    """quadratic_log, W = 0.1 cos(2 pi x), d = 1, n = 64, solved to lambda = 1."""
    grid = TorusGrid(1, 64)
    model = quadratic_log(1, ["cos 1 0.1"])
    state, trace = continuation_run(model, grid)
    return model, grid, state, trace


def random_density(grid, rng, amp=0.5):
    x = grid.coords
    k = rng.integers(1, 3, size=grid.dim)
    f = amp * np.cos(2 * np.pi * x @ k + rng.uniform(0, 2 * np.pi)) + 0.2 * amp * rng.standard_normal() * np.sin(
        2 * np.pi * x[:, 0]
    )
    m = np.exp(f)
    return m / (grid.weight * m.sum())


def smooth_field(grid, rng, amp=1.0):
    x = grid.coords
    k = rng.integers(-2, 3, size=grid.dim)
    k[0] = max(k[0], 1)
    return amp * np.cos(2 * np.pi * x @ k + rng.uniform(0, 2 * np.pi))
