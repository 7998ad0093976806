import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgames.bsde import Basis, Driver, SolveOptions, regress, solve_backward, solve_backward_exchangeable
from sdgames.errors import InvalidArgument, NumericalFailure
from sdgames.sim import GameSpec, make_time_grid, simulate_reference


def _zero_driver(E=1):
    return Driver(E, 1, lambda t, X, Z: np.zeros((X.shape[0], E)), "zero")


def test_basis_dimensions():
    assert Basis("polynomial", 2).dim(1) == 3
    assert Basis("polynomial", 2).dim(2) == 6
    assert Basis("symmetric").dim() == 6
    assert Basis("individual").dim() == 3
    with pytest.raises(InvalidArgument):
        Basis("chebyshev")


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=25, deadline=None)
def test_regress_recovers_polynomial(coef):
    x = np.linspace(-1, 1, 200)
    F = np.stack([np.ones_like(x), x, x * x], axis=1)
    y = F @ np.array(coef)
    assert np.allclose(regress(y, F, ridge=0.0), coef, atol=1e-8)


def test_regress_needs_enough_rows():
    with pytest.raises(InvalidArgument):
        regress(np.zeros(20), np.zeros((20, 3)))


def test_linear_bsde_is_exact():
    # Y = X, Z = 1 for driver 0 and terminal X
    g = make_time_grid(1.0, 10)
    b = simulate_reference(GameSpec(x0=0.3), g, 5000, 2)
    sol = solve_backward(b, _zero_driver(), lambda X: X.copy(), Basis("polynomial", 2), SolveOptions())
    # the in-sample residual of dW on the node features is not exactly 0
    assert abs(sol.y0[0] - 0.3) < 1e-3
    X = np.linspace(-1, 1, 5)[:, None]
    assert np.allclose(sol.z_at(3, X), 1.0, atol=2e-2)


def test_quadratic_terminal_matches_heat_equation():
    # Y_t = E[X_T^2 | X_t] = X_t^2 + T - t, Z = 2 X_t
    g = make_time_grid(1.0, 20)
    b = simulate_reference(GameSpec(x0=1.0), g, 50_000, 3, antithetic=True)
    sol = solve_backward(b, _zero_driver(), lambda X: X * X, Basis("polynomial", 2), SolveOptions())
    assert abs(sol.y0[0] - 2.0) < 5e-3
    assert abs(sol.y0_cv[0] - 2.0) < 5e-3


def test_terminal_row_is_exact_and_stored():
    g = make_time_grid(1.0, 5)
    b = simulate_reference(GameSpec(x0=0.0), g, 1000, 4)
    sol = solve_backward(b, _zero_driver(), lambda X: np.sin(X), Basis("polynomial", 2), SolveOptions())
    assert np.array_equal(sol.Y[-1, :, 0], np.sin(b.states[-1, :, 0]))
    assert sol.Z.shape == (5, 1000, 1, 1)


def test_ill_conditioned_design_raises():
    g = make_time_grid(1.0, 3)
    b = simulate_reference(GameSpec(x0=0.0), g, 1000, 4)
    b.states[1:] = 1e9 * np.round(b.states[1:] * 1e-9)  # collapse the design to one point
    with pytest.raises((NumericalFailure, InvalidArgument)):
        solve_backward(b, _zero_driver(), lambda X: X, Basis("polynomial", 2), SolveOptions(cond_max=1e6))


def test_nonfinite_driver_reports_node():
    g = make_time_grid(1.0, 4)
    b = simulate_reference(GameSpec(x0=0.0), g, 500, 4)
    drv = Driver(1, 1, lambda t, X, Z: np.full((X.shape[0], 1), np.nan if t > 0.5 else 0.0), "bad")
    with pytest.raises(NumericalFailure) as e:
        solve_backward(b, drv, lambda X: X, Basis("polynomial", 2), SolveOptions())
    assert e.value.index == 3


def test_exchangeable_linear_system():
    # Y^i = S with zero driver: Z^{ii} = Z^{ij} = 1/N
    N = 3
    g = make_time_grid(1.0, 8)
    b = simulate_reference(GameSpec(x0=0.2, n_players=N), g, 4000, 9)
    sol = solve_backward_exchangeable(
        b,
        lambda t, X, zo, zc: np.zeros_like(X),
        lambda X: np.repeat(X.mean(axis=1, keepdims=True), N, axis=1),
        Basis("symmetric"),
        SolveOptions(),
    )
    X = np.full((1, N), 0.4)
    # one own/cross partialling pass, not a joint fit: close but not exact
    assert np.allclose(sol.z_own_at(2, X), 1 / N, atol=2e-3)
    assert np.allclose(sol.z_cross_at(2, X), 1 / N, atol=2e-3)
    assert abs(sol.y0 - 0.2) < 1e-3


def test_solution_json_roundtrip():
    import json

    g = make_time_grid(1.0, 3)
    b = simulate_reference(GameSpec(x0=0.0), g, 300, 4)
    sol = solve_backward(b, _zero_driver(), lambda X: X, Basis("polynomial", 2), SolveOptions(keep_paths=False))
    d = json.loads(sol.to_json())
    assert d["driver"] == "zero" and len(d["y_coef"]) == 3
