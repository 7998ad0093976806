import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgames import zerosum as zs
from sdgames.errors import InvalidArgument
from sdgames.sim import GameSpec, Numerics

reals = st.floats(-50, 50, allow_nan=False)
SMALL = Numerics(n_paths=20_000)


def test_h_examples():
    assert zs.h1(0, 0, 0, 0) == 0
    assert zs.h1(0, 1, 2, 3) == 2.5
    assert zs.h2(0, 1, 2, 3) == 7.5


def test_H_examples():
    assert zs.H1(1, 2, 3) == 0.5
    assert zs.H_minus(5, 17) == 5
    u, val = zs.grid_min_h1(1, 2, 3)
    assert abs(u + 2) < 1e-9 and abs(val - 0.5) < 1e-9


@given(reals)
def test_H1_zero_z_and_v(x):
    assert zs.H1(x, 0, 0) == x


@given(reals, reals, reals, reals)
def test_hamiltonian_identity(x, z, u, v):
    # reflection identity between the two pre-Hamiltonians
    assert np.isclose(zs.h2(x, z, u, v), -zs.h1(x, -z, u, v), rtol=1e-12, atol=1e-9)


@given(reals, reals)
def test_isaacs_identity(x, z):
    assert zs.H_plus(x, z) == x
    assert zs.H_minus(x, z) == x
    assert zs.isaacs_gap(x, z) == 0


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=50)
def test_argmin_invariance(x, z, v):
    u = np.linspace(-10, 10, 1000)
    best = zs.h1(x, z, zs.argmin_u(z), v)
    assert np.all(best <= zs.h1(x, z, u, v) + 1e-12)
    assert np.isclose(best, zs.H1(x, z, v))
    w = np.linspace(-10, 10, 1000)
    assert np.all(zs.h2(x, z, u[0], zs.argmin_v(z)) <= zs.h2(x, z, u[0], w) + 1e-12)


def test_nested_grid_example():
    hi, lo = zs.nested_grid_values(1.0, 2.0)
    assert abs(hi - 1) <= 1e-2 and abs(lo - 1) <= 1e-2


def test_nash_fixed_point():
    assert zs.nash_fixed_point(0.3, 2, -3) == (-2, 3)
    assert zs.nash_fixed_point(0.3, 0, 0) == (0, 0)
    u, v = zs.nash_fixed_point(1, 2, -3)
    assert abs(zs.H1(1, 2, v) - zs.h1(1, 2, u, v)) <= 1e-12
    assert abs(zs.H2(1, -3, u) - zs.h2(1, -3, u, v)) <= 1e-12


@pytest.mark.parametrize("t,x,T,expected", [(0, 0, 1, (1, 1)), (0, 1, 2, (5, 4)), (2, 0.7, 2, (0.49, 1.4))])
def test_closed_form(t, x, T, expected):
    Y, Z = zs.closed_form(t, x, T)
    assert np.allclose((Y, Z), expected)


@given(st.floats(0, 1.9), st.floats(-3, 3))
def test_closed_form_solves_pde(t, x):
    # Y_t + Y_xx / 2 + x = 0 and Z = Y_x
    T, h = 2.0, 1e-4
    Y = lambda s, y: zs.closed_form(s, y, T)[0]  # noqa: E731
    yt = (Y(t + h, x) - Y(t - h, x)) / (2 * h) if t > h else (Y(t + h, x) - Y(t, x)) / h
    yxx = (Y(t, x + h) - 2 * Y(t, x) + Y(t, x - h)) / h**2
    assert abs(yt + 0.5 * yxx + x) < 1e-3
    assert abs(zs.closed_form(t, x, T)[1] - (Y(t, x + h) - Y(t, x - h)) / (2 * h)) < 1e-5


@pytest.mark.parametrize("T,x0", [(1.0, 0.0), (1.0, 1.0), (2.0, 1.0)])
def test_solve_saddle_small(T, x0):
    rep = zs.solve_saddle(GameSpec(T=T, k=0, x0=x0, n_players=2), SMALL)
    Y, Z = zs.closed_form(0, x0, T)
    assert abs(rep.Y0 - Y) / Y < 0.02
    assert abs(rep.Z0 - Z) / Z < 0.05
    assert rep.V_plus == rep.V_minus == rep.Y0


def test_saddle_spec_checks():
    with pytest.raises(InvalidArgument):
        zs.solve_saddle(GameSpec(n_players=3), SMALL)
    with pytest.raises(InvalidArgument):
        zs.solve_saddle(GameSpec(k=1.0, n_players=2), SMALL)


def test_nash_system_terminal_and_antisymmetry():
    spec = GameSpec(T=1.0, k=0, x0=1.0, n_players=2)
    sol = zs.solve_nash_system_2p(spec, SMALL)
    assert np.array_equal(sol.Y[-1, :, 0], sol.Y[-1, :, 1] * -1)
    defect, scale = zs.antisymmetry_defect(sol)
    assert defect <= 0.02 * scale
    assert abs(sol.y0[0] - 3.0) / 3.0 < 0.02


def test_printed_cross_sign_variant_differs():
    spec = GameSpec(T=1.0, k=0, x0=1.0, n_players=2)
    a = zs.solve_nash_system_2p(spec, SMALL)
    b = zs.solve_nash_system_2p(spec, SMALL, printed_cross_sign=True)
    assert abs(a.y0[0] - b.y0[0]) > 1.0


def test_deviations():
    rep = zs.solve_saddle(GameSpec(T=1.0, k=0, x0=0.0, n_players=2), SMALL)
    devs = [zs.Deviation(1, "shift", 0.0), zs.Deviation(1, "shift", 0.5), zs.Deviation(2, "shift", 0.5)]
    zero, p1, p2 = zs.deviation_test(rep, devs)
    assert zero.gap == 0.0 and zero.se == 0.0
    assert p1.gap > p1.eps and p1.ok
    assert p2.gap < -p2.eps and p2.ok
    assert all(g.ok for g in zs.deviation_test(rep))


def test_oracle_residual_halves():
    r1, s1 = zs.oracle_residual(1.0, 1.0, 20, 10_000, 3)
    r2, s2 = zs.oracle_residual(1.0, 1.0, 40, 10_000, 3)
    assert r2 <= r1 / 2 + 2 * np.hypot(s1 / 2, s2)


def test_report_json():
    import json

    rep = zs.solve_saddle(GameSpec(T=1.0, k=0, x0=0.0, n_players=2), SMALL)
    d = json.loads(rep.to_json())
    assert d["V_plus"] == d["V_minus"] == d["Y0"]
    assert len(d["feedback"]["u"]) == SMALL.n_steps
