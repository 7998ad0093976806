"""Large-population convergence of the N-player equilibrium to the mean field one.

Two distances are tracked as functions of ``N``: the squared gap between the
N-player value and the mean field value, and the time integral of the
squared Wasserstein-2 distance between the laws of one player's equilibrium
control in the two models.  Both are expected to decay like ``1 / N`` or
faster; rates are fitted on a log-log scale.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import Basis, SolveOptions, solve_backward_exchangeable
from .errors import InvalidArgument
from .mfg import MFGSolution, mfg_closed_form, solve_mfg_fixed_point
from .nplayer import NPlayerSolution, design_paths, riccati_oracle, solve_nash_system
from .sim import GameSpec, Numerics, control_samples, controlled_moments, make_time_grid, mean_and_se

N_BOOT_KEY = 77
CSV_COLUMNS = ("N", "value_gap_sq", "value_gap_se", "w2_gap", "w2_gap_se", "clt_baseline")


# ---------------------------------------------------------------- distances


def wasserstein2_gaussian(m1: float, s1: float, m2: float, s2: float) -> float:
    """W2 between ``N(m1, s1^2)`` and ``N(m2, s2^2)`` on the real line."""
    if s1 < 0 or s2 < 0:
        raise InvalidArgument("standard deviations must be >= 0")
    return math.hypot(m1 - m2, s1 - s2)


def empirical_w2(a, b) -> float:
    """W2 between two equal-size empirical measures (sorted coupling)."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise InvalidArgument(f"samples must have equal sizes, got {a.size} and {b.size}")
    if a.size == 0:
        raise InvalidArgument("samples must be non-empty")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _w2_sq_sorted(a_sorted, b_sorted):
    return np.mean((a_sorted - b_sorted) ** 2, axis=-1)


def trapezoid(values, t) -> float:
    return float(np.trapezoid(values, t)) if hasattr(np, "trapezoid") else float(np.trapz(values, t))


def clt_baseline(variance: float, N: int) -> float:
    """Benchmark rate ``variance / N`` of an empirical mean of ``N`` draws."""
    if N < 1:
        raise InvalidArgument(f"N must be >= 1, got {N}")
    if variance < 0:
        raise InvalidArgument("variance must be >= 0")
    return variance / N


# ---------------------------------------------------------------- oracles


def oracle_value_gap(spec: GameSpec, N: int, n_steps: int = 50) -> float:
    """Signed gap ``V^N - V^MFG`` of the quadratic-ansatz solutions."""
    grid = make_time_grid(spec.T, n_steps)
    sN = GameSpec(spec.T, spec.k, spec.x0, N)
    return riccati_oracle(sN, grid).value(spec.x0) - mfg_closed_form(spec, grid).value


def discrete_value_gap(spec: GameSpec, N: int, n_steps: int = 50) -> float:
    """Signed gap produced by the explicit time-stepping scheme itself.

    Under the quadratic ansatz the one-step recursion with exact
    conditional expectations closes on the coefficients, so this is what
    the least-squares solver converges to as the sample size grows with
    ``n_steps`` fixed.  It separates time-discretisation error from
    regression error.
    """
    grid = make_time_grid(spec.T, n_steps)
    K, dt, k = n_steps, grid.dt, spec.k
    decay = math.exp(-k * dt)
    var = dt if k == 0 else -math.expm1(-2 * k * dt) / (2 * k)
    phi = dt if k == 0 else -math.expm1(-k * dt) / k
    # E[X_{k+1}^2 dW | x] / dt = 2 x decay phi / dt and E[S_{k+1} dW^i] / dt = phi / (N dt)
    g = decay * phi / dt

    def coef(a, c):
        return 2 * a * g, c * phi / (dt * N)

    A = np.empty(K + 1)
    A[K] = 1.0
    D = 0.0
    Dm = 0.0
    Cs = np.empty(K + 1)
    Cs[K] = 0.0
    for j in range(K - 1, -1, -1):
        a, c = A[j + 1], Cs[j + 1]
        zx, zc = coef(a, c)
        A[j] = a * decay**2 - 0.5 * zx * zx * dt
        Cs[j] = c * decay - N * zc * zx * dt + dt
        D = D + a * var + (-0.5 * zc * zc - (N - 1) * zc * zc) * dt
        Dm = Dm + a * var
    # mean flow of the representative player under its own scheme
    m = np.empty(K + 1)
    m[0] = spec.x0
    for j in range(K):
        m[j + 1] = decay * m[j] - phi * 2 * A[j + 1] * g * m[j]
    Dm += float(np.sum(m[:K])) * dt
    vN = A[0] * spec.x0**2 + Cs[0] * spec.x0 + D
    vM = A[0] * spec.x0**2 + Dm
    return float(vN - vM)


def oracle_control_gap(spec: GameSpec, N: int, n_steps: int = 50, substeps: int = 20) -> float:
    """Time-integrated squared W2 between the Gaussian control laws.

    Both models share the feedback slope ``-2A`` and hence the variance of
    the control; only the means differ, through the offset ``C / N`` of the
    N-player feedback and the mean state it induces.
    """
    M = n_steps * substeps
    fine = make_time_grid(spec.T, M)
    ric = riccati_oracle(GameSpec(spec.T, spec.k, spec.x0, N), fine, substeps=1)
    h = fine.dt
    A, C = ric.A, ric.C
    # e = m_N - m_MFG solves e' = -(k + 2A) e - C / N, e(0) = 0 (RK2 on the table)
    e = np.zeros(M + 1)
    for j in range(M):
        f0 = -(spec.k + 2 * A[j]) * e[j] - C[j] / N
        pred = e[j] + h * f0
        f1 = -(spec.k + 2 * A[j + 1]) * pred - C[j + 1] / N
        e[j + 1] = e[j] + 0.5 * h * (f0 + f1)
    gap = (2 * A * e + C / N) ** 2
    return trapezoid(gap, fine.nodes)


# ---------------------------------------------------------------- LSMC gaps


@dataclass
class ValueGap:
    """Signed value gap ``V^N - V^MFG`` with its paired standard error."""

    N: int
    gap: float
    se: float
    regression_gap: float
    nplayer_value: float
    mfg_value: float

    @property
    def squared(self) -> float:
        return self.gap * self.gap

    @property
    def squared_se(self) -> float:
        return 2.0 * abs(self.gap) * self.se

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "gap": self.gap,
            "se": self.se,
            "gap_sq": self.squared,
            "gap_sq_se": self.squared_se,
            "regression_gap": self.regression_gap,
            "nplayer_value": self.nplayer_value,
            "mfg_value": self.mfg_value,
        }


def _paired_value_gap(nash: NPlayerSolution, mfg: MFGSolution, paths) -> ValueGap:
    grid = nash.grid
    m = np.asarray(mfg.flow.values)

    def driver(t, X, z_own, z_cross):
        return m[int(round(t / grid.dt))] - 0.5 * z_own * z_own

    num = nash.numerics
    opts = SolveOptions(ridge=num.ridge, z_max=num.z_max, keep_paths=False)
    pooled = solve_backward_exchangeable(
        paths, driver, lambda X: X * X, Basis("individual"), opts, cross=False, name="mfg-pooled", x_eval=nash.spec.x0
    )
    # with a common initial shift the paired pathwise difference stays an
    # estimate of the gap at x0: the shift enters the gap linearly and the
    # antithetic pairs cancel it
    diff = nash.pooled.pathwise.mean(axis=1) - pooled.pathwise.mean(axis=1)
    gap, se = mean_and_se(diff, bool(getattr(paths, "antithetic", False)))
    return ValueGap(nash.spec.n_players, float(gap), float(se), nash.value - pooled.y0, nash.value, pooled.y0)


def value_gap(spec: GameSpec, N: int, numerics: Numerics = Numerics(), *, mfg: MFGSolution | None = None) -> ValueGap:
    """LSMC value gap between the N-player and mean field equilibria.

    The N-player system and the mean field representative (driven by the
    fitted equilibrium flow of ``mfg``) are solved on the same design
    paths, so most Monte Carlo noise cancels in the difference.
    """
    if N < 2:
        raise InvalidArgument("N must be >= 2")
    mfg = mfg or solve_mfg_fixed_point(GameSpec(spec.T, spec.k, spec.x0, 1), numerics)
    sN = GameSpec(spec.T, spec.k, spec.x0, N)
    paths = design_paths(sN, numerics)
    nash = solve_nash_system(sN, numerics, paths=paths)
    return _paired_value_gap(nash, mfg, paths)


@dataclass
class ControlGap:
    """Time-integrated squared W2 between control laws, with bootstrap SE."""

    N: int
    gap: float
    se: float
    per_node: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"N": self.N, "gap": self.gap, "se": self.se, "per_node": self.per_node.tolist()}


def control_law_gap(
    nash: NPlayerSolution, mfg: MFGSolution, *, n_samples: int | None = None, seed: int | None = None,
    player: int = 0, n_boot: int = 100,
) -> ControlGap:
    """Integrated ``W2^2`` between player ``player``'s N-player control and
    the mean field control.

    Both systems are simulated from the same seed, so the chosen player and
    the representative share their Brownian increments (common random
    numbers).  The per-node squared distances are integrated over
    ``t_0..t_{K-1}`` with the trapezoid rule; the standard error comes from
    a paired bootstrap over paths.
    """
    num = nash.numerics
    n = n_samples or num.w2_samples
    s = num.seed + 11 if seed is None else seed
    grid = nash.grid
    spec = nash.spec
    a = control_samples(spec, grid, nash.feedback, n, s, player=player, alpha_max=num.alpha_max, threads=num.threads)
    rep = GameSpec(spec.T, spec.k, spec.x0, 1, spec.xi_var)
    b = control_samples(rep, grid, mfg.feedback, n, s, alpha_max=num.alpha_max, threads=num.threads)
    if player != 0:
        # the representative has player-0 noise; align it with the chosen player
        b = control_samples(
            GameSpec(spec.T, spec.k, spec.x0, player + 1, spec.xi_var), grid,
            lambda k, t, X: mfg.feedback(k, t, X.reshape(-1, 1)).reshape(X.shape),
            n, s, player=player, alpha_max=num.alpha_max, threads=num.threads,
        )
    t = grid.nodes[: grid.n_steps]
    per = _w2_sq_sorted(np.sort(a, axis=1), np.sort(b, axis=1))
    gap = trapezoid(per, t)
    rng = np.random.default_rng(np.random.SeedSequence(s, spawn_key=(N_BOOT_KEY,)))
    boots = np.empty(n_boot)
    for r in range(n_boot):
        idx = rng.integers(0, n, n)
        boots[r] = trapezoid(_w2_sq_sorted(np.sort(a[:, idx], axis=1), np.sort(b[:, idx], axis=1)), t)
    return ControlGap(spec.n_players, gap, float(boots.std(ddof=1)), per)


# ---------------------------------------------------------------- rates


def fit_rate(N, values, *, exclude_smallest: bool = True) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log(values)`` on ``log(N)``."""
    N = np.asarray(N, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if N.shape != v.shape:
        raise InvalidArgument("N and values must have equal lengths")
    order = np.argsort(N)
    N, v = N[order], v[order]
    if exclude_smallest:
        N, v = N[1:], v[1:]
    if N.size < 2:
        raise InvalidArgument("need at least two points to fit a rate")
    if np.any(v <= 0) or np.any(N <= 0):
        raise InvalidArgument("rates need positive N and values")
    slope, intercept = np.polyfit(np.log(N), np.log(v), 1)
    return float(slope), float(intercept)


def monotone_decrease(values, se, n_sigma: float = 2.0) -> bool:
    """True when every consecutive drop exceeds ``n_sigma`` combined SE."""
    v = np.asarray(values, dtype=np.float64)
    s = np.asarray(se, dtype=np.float64)
    drops = v[:-1] - v[1:]
    return bool(np.all(drops > n_sigma * np.hypot(s[:-1], s[1:])))


@dataclass
class RateRow:
    N: int
    value_gap_sq: float
    value_gap_se: float
    w2_gap: float
    w2_gap_se: float
    clt_baseline: float
    value_gap: float = 0.0
    oracle_value_gap: float = 0.0
    discrete_value_gap: float = 0.0
    oracle_w2_gap: float = 0.0
    seconds: float = 0.0


@dataclass
class RateTable:
    """Convergence measurements across population sizes."""

    spec: GameSpec
    rows: list[RateRow]
    mfg_value: float
    variance: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        Ns = [r.N for r in self.rows]
        if any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise InvalidArgument("rows must have strictly increasing N")

    @property
    def N(self) -> np.ndarray:
        return np.array([r.N for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    @property
    def value_slope(self) -> tuple[float, float]:
        return fit_rate(self.N, self.column("value_gap_sq"))

    @property
    def w2_slope(self) -> tuple[float, float]:
        return fit_rate(self.N, self.column("w2_gap"))

    @property
    def oracle_value_slope(self) -> tuple[float, float]:
        return fit_rate(self.N, self.column("oracle_value_gap") ** 2)

    @property
    def C_hat(self) -> float:
        """Smallest constant with ``N * gap^2 <= C`` over the table."""
        return float(np.max(self.N * self.column("value_gap_sq")))

    @property
    def w2_monotone(self) -> bool:
        return monotone_decrease(self.column("w2_gap"), self.column("w2_gap_se"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.N] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def sidecar(self) -> dict:
        vs, vi = self.value_slope
        ws, wi = self.w2_slope
        os_, oi = self.oracle_value_slope
        return {
            "value_gap_sq": {"slope": vs, "intercept": vi},
            "w2_gap": {"slope": ws, "intercept": wi},
            "oracle_value_gap_sq": {"slope": os_, "intercept": oi},
            "C_hat": self.C_hat,
            "w2_monotone_2se": self.w2_monotone,
            "fit_excludes_smallest_N": True,
        }

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "mfg_value": self.mfg_value,
            "state_variance": self.variance,
            "rows": [{k: v for k, v in r.__dict__.items() if k != "seconds"} for r in self.rows],
            "fits": self.sidecar(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def run_convergence_suite(
    spec: GameSpec, N_list=None, numerics: Numerics = Numerics(), *, progress=None, mfg: MFGSolution | None = None
) -> RateTable:
    """Value and control-law gaps for every ``N`` in ``N_list``.

    The mean field equilibrium is computed once (or taken from ``mfg``).  The CLT column uses the
    time-averaged variance of the equilibrium state.  ``progress`` is an
    optional callable receiving each finished row.
    """
    import time

    N_list = sorted(int(n) for n in (N_list or numerics.n_list))
    if not N_list or N_list[0] < 2:
        raise InvalidArgument("N_list needs values >= 2")
    if N_list[-1] > numerics.max_players:
        raise InvalidArgument(f"N={N_list[-1]} exceeds max_players={numerics.max_players}")
    rep = GameSpec(spec.T, spec.k, spec.x0, 1, spec.xi_var)
    mfg = mfg or solve_mfg_fixed_point(rep, numerics)
    grid = mfg.grid
    _, _, var, _ = controlled_moments(rep, grid, mfg.feedback, numerics.w2_samples, numerics.seed + 13)
    variance = float(np.mean(var[:, 0]))
    rows = []
    for N in N_list:
        t0 = time.perf_counter()
        sN = GameSpec(spec.T, spec.k, spec.x0, N, spec.xi_var)
        paths = design_paths(sN, numerics)
        nash = solve_nash_system(sN, numerics, paths=paths)
        vg = _paired_value_gap(nash, mfg, paths)
        del paths
        cg = control_law_gap(nash, mfg)
        row = RateRow(
            N=N,
            value_gap_sq=vg.squared,
            value_gap_se=vg.squared_se,
            w2_gap=cg.gap,
            w2_gap_se=cg.se,
            clt_baseline=clt_baseline(variance, N),
            value_gap=vg.gap,
            oracle_value_gap=oracle_value_gap(spec, N, numerics.n_steps),
            discrete_value_gap=discrete_value_gap(spec, N, numerics.n_steps),
            oracle_w2_gap=oracle_control_gap(spec, N, numerics.n_steps),
            seconds=time.perf_counter() - t0,
        )
        rows.append(row)
        if progress is not None:
            progress(row)
    diag = {"mfg_iterations": mfg.iterations, "mfg_trace": mfg.trace}
    return RateTable(spec, rows, mfg.value, variance, diag)
