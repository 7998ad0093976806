import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from sdgames.errors import InvalidArgument
from sdgames.nplayer import (
    Perturbation,
    equilibrium_bundle,
    equilibrium_driver,
    feedback_agreement,
    nash_deviation_gap,
    oracle_residuals,
    player_value,
    pooled_driver,
    riccati_oracle,
    solve_nash_system,
)
from sdgames.sim import GameSpec, Numerics, make_time_grid

SMALL = Numerics(n_paths=20_000)


def _closed_form_k0(N, x0, T=1.0):
    # k = 0: A = 1/(1+2tau), C = tau(1+tau)/(1+2tau), D = int (A - q C^2) dtau
    q = (2 * N - 1) / (2 * N * N)
    A = 1 / (1 + 2 * T)
    C = T * (1 + T) / (1 + 2 * T)
    D = quad(lambda s: 1 / (1 + 2 * s) - q * (s * (1 + s) / (1 + 2 * s)) ** 2, 0, T)[0]
    return A, C, D


@pytest.mark.parametrize("N", [2, 4, 64])
def test_riccati_matches_closed_form_k0(N):
    orc = riccati_oracle(GameSpec(T=1.0, k=0.0, x0=1.0, n_players=N), make_time_grid(1.0, 50))
    A, C, D = _closed_form_k0(N, 1.0)
    assert abs(orc.A[0] - 1 / 3) < 1e-12
    assert abs(orc.C[0] - C) < 1e-10 and abs(orc.D[0] - D) < 1e-10
    assert np.all(orc.B == 0)
    assert abs(orc.value(1.0) - (A + C + D)) < 1e-10


def test_riccati_matches_scipy_k1():
    N, k = 4, 1.0
    q = (2 * N - 1) / (2 * N * N)

    def rhs(t, y):
        A, C, D = y
        return [2 * A * A + 2 * k * A, (2 * A + k) * C - 1, -A + q * C * C]

    ref = solve_ivp(rhs, (1.0, 0.0), [1.0, 0.0, 0.0], rtol=1e-12, atol=1e-12).y[:, -1]
    orc = riccati_oracle(GameSpec(T=1.0, k=k, x0=1.0, n_players=N), make_time_grid(1.0, 50))
    assert np.allclose([orc.A[0], orc.C[0], orc.D[0]], ref, atol=1e-9)


@given(st.integers(2, 6), st.data())
@settings(max_examples=30, deadline=None)
def test_pooled_driver_matches_scalar_driver(N, data):
    X = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=N, max_size=N)))
    zo = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=N, max_size=N)))
    zc = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=N, max_size=N)))
    pooled = pooled_driver(0.0, X[None], zo[None], zc[None])[0]
    for i in range(N):
        row = np.full(N, zc[i])
        row[i] = zo[i]
        assert math.isclose(pooled[i], equilibrium_driver(i, X, row, zo), rel_tol=1e-12, abs_tol=1e-9)


def test_equilibrium_driver_validates():
    with pytest.raises(InvalidArgument):
        equilibrium_driver(3, np.zeros(3), np.zeros(3), np.zeros(3))
    with pytest.raises(InvalidArgument):
        equilibrium_driver(0, np.zeros(3), np.zeros(2), np.zeros(3))


def test_oracle_residuals_scale_with_dt():
    spec = GameSpec(T=1.0, k=0.0, x0=1.0, n_players=3)
    r1 = oracle_residuals(spec, 20, 10_000, 1).mean()
    r2 = oracle_residuals(spec, 40, 10_000, 1).mean()
    assert r2 <= 0.55 * r1


@pytest.fixture(scope="module")
def small_solution():
    return solve_nash_system(GameSpec(T=1.0, k=0.0, x0=1.0, n_players=3), SMALL)


def test_small_solve_close_to_oracle(small_solution):
    spec = small_solution.spec
    orc = riccati_oracle(spec, small_solution.grid)
    assert abs(small_solution.value - orc.value(1.0)) / orc.value(1.0) < 0.02
    assert player_value(small_solution, 2) == small_solution.value


def test_feedback_agreement(small_solution):
    orc = riccati_oracle(small_solution.spec, small_solution.grid)
    bundle = equilibrium_bundle(small_solution, n_paths=5000)
    err, mom = feedback_agreement(small_solution, orc, bundle)
    assert err < 0.01 * mom


def test_deviations_do_not_pay(small_solution):
    bundle = equilibrium_bundle(small_solution, n_paths=20_000)
    for p in (Perturbation("shift", 0.5), Perturbation("scale", 0.8)):
        g = nash_deviation_gap(small_solution, 1, p, bundle=bundle)
        assert g.gap >= -3 * g.se
    zero = nash_deviation_gap(small_solution, 1, Perturbation("shift", 0.0), bundle=bundle)
    assert zero.gap == 0.0


def test_solve_validates_population():
    with pytest.raises(InvalidArgument):
        solve_nash_system(GameSpec(n_players=1), SMALL)
    with pytest.raises(InvalidArgument):
        solve_nash_system(GameSpec(n_players=80), SMALL)


def test_riccati_csv_header():
    orc = riccati_oracle(GameSpec(n_players=2), make_time_grid(1.0, 4))
    lines = orc.to_csv().splitlines()
    assert lines[0] == "t,A,B,C,D" and len(lines) == 6
