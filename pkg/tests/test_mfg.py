import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from sdgames.errors import InvalidArgument, IterationFailure
from sdgames.mfg import (
    MeanFlow,
    consistency_residual,
    mean_flow_from_feedback,
    mfg_closed_form,
    mfg_driver,
    optimal_control,
    solve_mfg_fixed_point,
)
from sdgames.sim import GameSpec, Numerics, make_time_grid

SMALL = Numerics(n_paths=20_000, mfg_paths=100_000)


def test_driver_and_control():
    assert mfg_driver(3.0, 2.0, 0.5) == 0.5 - 2.0
    assert optimal_control(1.5) == -1.5


def test_closed_form_k0_analytic():
    # k = 0, T = 1: A(0) = 1/3, m(t) = x0 (3 - 2t) / 3, V = x0^2/3 + ln(3)/2 + 2 x0 / 3
    grid = make_time_grid(1.0, 50)
    for x0 in (0.0, 1.0, -0.5):
        orc = mfg_closed_form(GameSpec(T=1.0, k=0.0, x0=x0), grid)
        expected = x0 * x0 / 3 + 0.5 * math.log(3) + 2 * x0 / 3
        assert abs(orc.value - expected) < 1e-9
        assert np.allclose(orc.m, x0 * (3 - 2 * grid.nodes) / 3, atol=1e-9)
    assert abs(mfg_closed_form(GameSpec(T=1.0, k=0.0, x0=1.0), grid).value - 1.549306) < 1e-6


def test_closed_form_k1_against_scipy():
    k, x0 = 1.0, 1.0
    A = solve_ivp(lambda t, a: 2 * a * a + 2 * k * a, (1.0, 0.0), [1.0], dense_output=True, rtol=1e-12, atol=1e-12)
    sol = solve_ivp(
        lambda t, y: [-(k + 2 * A.sol(t)[0]) * y[0], A.sol(t)[0] + y[0]],
        (0.0, 1.0), [x0, 0.0], rtol=1e-12, atol=1e-12,
    )
    # V = A(0) x0^2 + int_0^T (A + m) dt
    value = A.sol(0.0)[0] * x0 * x0 + sol.y[1, -1]
    orc = mfg_closed_form(GameSpec(T=1.0, k=k, x0=x0), make_time_grid(1.0, 50))
    assert abs(orc.value - value) < 1e-7
    assert abs(orc.value - 0.937408) < 1e-6


def test_mean_flow_interpolation():
    f = MeanFlow(np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    assert f(0.25) == 1.5
    assert f.sup_distance(MeanFlow(f.t, np.array([1.5, 2.0]))) == 1.0


def test_mean_flow_from_zero_feedback_is_ou_mean():
    grid = make_time_grid(1.0, 10)
    flow = mean_flow_from_feedback(GameSpec(k=1.0, x0=2.0), grid, lambda k, t, X: 0 * X, 20_000, 1, antithetic=True)
    assert np.allclose(flow.values, 2.0 * np.exp(-grid.nodes), atol=1e-12)


@pytest.fixture(scope="module")
def small_mfg():
    return solve_mfg_fixed_point(GameSpec(T=1.0, k=0.0, x0=1.0), SMALL)


def test_fixed_point_small(small_mfg):
    orc = mfg_closed_form(small_mfg.spec, small_mfg.grid)
    assert small_mfg.iterations <= 20
    assert abs(small_mfg.value - orc.value) / orc.value < 0.02
    assert small_mfg.flow.sup_distance(MeanFlow(orc.t, orc.m)) < 0.01
    res, se = consistency_residual(small_mfg, 100_000, 4242, with_se=True)
    assert res <= max(SMALL.tol, 3 * se)


def test_iteration_failure_carries_trace():
    with pytest.raises(IterationFailure) as e:
        solve_mfg_fixed_point(GameSpec(x0=1.0), Numerics(n_paths=2000, mfg_paths=2000), tol=1e-12, max_iter=2)
    assert len(e.value.trace) == 2
    assert e.value.to_dict()["error"] == "iteration-failure"


def test_damping_validated():
    with pytest.raises(InvalidArgument):
        solve_mfg_fixed_point(GameSpec(x0=1.0), SMALL, damping=0.0)


def test_oracle_csv_with_estimate(small_mfg):
    orc = mfg_closed_form(small_mfg.spec, small_mfg.grid)
    text = orc.to_csv(m_hat=small_mfg.flow.values)
    assert text.splitlines()[0] == "t,m_hat,A,D"
