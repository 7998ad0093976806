import time

import pytest

from sdgames.mfg import solve_mfg_fixed_point
from sdgames.sim import GameSpec, Numerics

# criterion -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


@pytest.fixture(scope="session")
def default_numerics():
    return Numerics()


@pytest.fixture(scope="session")
def mfg_k0(default_numerics):
    t0 = time.perf_counter()
    sol = solve_mfg_fixed_point(GameSpec(T=1.0, k=0.0, x0=1.0), default_numerics)
    sol.diagnostics["seconds"] = time.perf_counter() - t0
    return sol


@pytest.fixture(scope="session")
def rate_table(mfg_k0, default_numerics):
    from sdgames.convergence import run_convergence_suite

    t0 = time.perf_counter()
    table = run_convergence_suite(GameSpec(T=1.0, k=0.0, x0=1.0), default_numerics.n_list, default_numerics, mfg=mfg_k0)
    # the suite's own mean field solve was done by the shared fixture
    table.diagnostics["seconds"] = time.perf_counter() - t0 + mfg_k0.diagnostics["seconds"]
    return table


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
