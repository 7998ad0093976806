import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from sdgames.convergence import (
    CSV_COLUMNS,
    RateRow,
    RateTable,
    clt_baseline,
    control_law_gap,
    discrete_value_gap,
    empirical_w2,
    fit_rate,
    monotone_decrease,
    oracle_control_gap,
    oracle_value_gap,
    value_gap,
    wasserstein2_gaussian,
)
from sdgames.errors import InvalidArgument
from sdgames.mfg import solve_mfg_fixed_point
from sdgames.nplayer import solve_nash_system
from sdgames.sim import GameSpec, Numerics, control_samples

SPEC = GameSpec(T=1.0, k=0.0, x0=1.0)
SMALL = Numerics(n_paths=20_000, mfg_paths=100_000, w2_samples=4000)


def _c_squared_integral():
    return quad(lambda s: (s * (1 + s) / (1 + 2 * s)) ** 2, 0, 1)[0]


def test_w2_gaussian_examples():
    assert wasserstein2_gaussian(0, 1, 0, 1) == 0
    assert wasserstein2_gaussian(1, 1, 0, 1) == 1
    assert wasserstein2_gaussian(0, 2, 0, 1) == 1


def test_empirical_w2_examples():
    a = np.random.default_rng(0).normal(size=100)
    assert empirical_w2(a, a) == 0
    assert math.isclose(empirical_w2(a, a + 0.7), 0.7, rel_tol=1e-12)
    assert empirical_w2([0, 1], [1, 2]) == 1
    with pytest.raises(InvalidArgument):
        empirical_w2([0, 1], [1])


samples = st.lists(st.floats(-100, 100), min_size=5, max_size=5)


@given(samples, samples, samples)
def test_empirical_w2_axioms(a, b, c):
    assert empirical_w2(a, b) == empirical_w2(b, a)
    assert empirical_w2(a, a) == 0
    assert empirical_w2(a, b) <= empirical_w2(a, c) + empirical_w2(c, b) + 1e-9


def test_fit_rate_synthetic():
    N = np.array([2, 4, 8, 16, 32, 64])
    s, _ = fit_rate(N, 1 / N)
    assert abs(s + 1) < 1e-10
    s, i = fit_rate(N, 4 / N**2)
    assert abs(s + 2) < 1e-10 and abs(i - math.log(4)) < 1e-10


def test_clt_baseline_examples():
    assert clt_baseline(4, 100) == 0.04
    assert clt_baseline(2.5, 1) == 2.5
    assert clt_baseline(0, 7) == 0


def test_oracle_value_gap_n2():
    # gap = -(2N-1)/(2N^2) int C^2 with C(tau) = tau(1+tau)/(1+2tau)
    gap = oracle_value_gap(SPEC, 2)
    assert abs(gap + 3 / 8 * _c_squared_integral()) < 1e-9
    assert abs(gap**2 - 3.90625e-3) < 1e-6


def test_oracle_value_gap_properties():
    gaps = [abs(oracle_value_gap(SPEC, N)) for N in (2, 4, 8, 16, 32, 64)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    at_zero = oracle_value_gap(GameSpec(T=1.0, k=0.0, x0=0.0), 4)
    assert at_zero < 0 and abs(at_zero + 7 / 32 * _c_squared_integral()) < 1e-9
    slope, _ = fit_rate([2, 4, 8, 16, 32, 64], np.square(gaps))
    assert slope <= -1.8


@pytest.mark.parametrize("k", [0.0, 1.0])
def test_discrete_gap_converges_to_oracle(k):
    spec = GameSpec(T=1.0, k=k, x0=1.0)
    errs = [abs(discrete_value_gap(spec, 8, K) - oracle_value_gap(spec, 8)) for K in (50, 100, 200)]
    assert errs[1] < 0.6 * errs[0] and errs[2] < 0.6 * errs[1]


def test_oracle_control_gap_scales_like_inverse_square():
    g = [oracle_control_gap(SPEC, N) for N in (4, 8, 16, 32, 64)]
    slope, _ = fit_rate([4, 8, 16, 32, 64], g, exclude_smallest=False)
    assert abs(slope + 2) < 0.05


def test_monotone_decrease():
    assert monotone_decrease([3, 2, 1], [0.1, 0.1, 0.1])
    assert not monotone_decrease([3, 2.9, 1], [0.1, 0.1, 0.1])


def test_rate_table_rows_and_csv():
    rows = [RateRow(N, 1 / N**2, 0.0, 0.5 / N**2, 0.0, 1 / N) for N in (2, 4, 8)]
    t = RateTable(SPEC, rows, 1.5, 1.0)
    lines = t.to_csv().splitlines()
    assert tuple(lines[0].split(",")) == CSV_COLUMNS and len(lines) == 4
    assert abs(t.value_slope[0] + 2) < 1e-10
    assert t.C_hat == 0.5
    with pytest.raises(InvalidArgument):
        RateTable(SPEC, rows[::-1], 1.5, 1.0)


@pytest.fixture(scope="module")
def small_mfg():
    return solve_mfg_fixed_point(SPEC, SMALL)


def test_value_gap_small(small_mfg):
    vg = value_gap(SPEC, 2, SMALL, mfg=small_mfg)
    assert abs(vg.gap - oracle_value_gap(SPEC, 2)) < 0.003
    assert vg.squared_se >= 0


def test_control_gap_exchangeable_and_degenerate(small_mfg):
    nash = solve_nash_system(GameSpec(T=1.0, k=0.0, x0=1.0, n_players=2), SMALL)
    g0 = control_law_gap(nash, small_mfg, player=0)
    g1 = control_law_gap(nash, small_mfg, player=1)
    assert abs(g0.gap - g1.gap) <= 2 * math.hypot(g0.se, g1.se) + 0.05 * g0.gap
    assert abs(g0.gap - oracle_control_gap(SPEC, 2)) < 0.1 * oracle_control_gap(SPEC, 2)
    # mean field law against itself
    a = control_samples(SPEC, nash.grid, small_mfg.feedback, 2000, 5)
    assert np.all([empirical_w2(x, x) == 0 for x in a])


def test_lsmc_gaps_agree_with_oracle_within_3se(rate_table):
    # cross-validation invariant: squared value gaps vs oracle, 3 combined SE
    lsmc = rate_table.column("value_gap_sq")
    se = rate_table.column("value_gap_se")
    oracle = rate_table.column("oracle_value_gap") ** 2
    assert np.all(np.abs(lsmc - oracle) <= 3 * se)
