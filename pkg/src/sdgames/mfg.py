"""Mean field equilibrium of the linear-quadratic example.

A representative player with state ``dX = (-k X + a) dt + dW`` minimises
``E[int (|a|^2 / 2 + m_t) dt + |X_T|^2]`` against a population mean flow
``m``.  Under the reference measure its BSDE has driver ``m_t - |Z|^2 / 2``
and optimal feedback ``-Z``; an equilibrium is a flow reproduced by the mean
of the optimally controlled state.  Only the first moment of the population
law enters the coupling, so the flow is all that is iterated.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import Basis, BSDESolution, Driver, SolveOptions, solve_backward
from .errors import InvalidArgument, IterationFailure
from .sim import GameSpec, Numerics, TimeGrid, controlled_moments, make_time_grid, reference_paths


def mfg_driver(x, z, m_t):
    """Reference-measure driver ``m_t - z^2 / 2``; ``x`` does not enter."""
    z = np.asarray(z, dtype=np.float64)
    return m_t - 0.5 * z * z + 0.0 * np.asarray(x, dtype=np.float64)


def optimal_control(z):
    """Minimiser of ``z a + a^2 / 2``."""
    return -np.asarray(z, dtype=np.float64)


@dataclass
class MeanFlow:
    """Population mean on the grid nodes, linearly interpolated in between."""

    t: np.ndarray
    values: np.ndarray
    se: np.ndarray | None = None

    def __call__(self, t):
        return np.interp(t, self.t, self.values)

    def sup_distance(self, other: "MeanFlow") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def to_dict(self) -> dict:
        d = {"t": self.t.tolist(), "m": self.values.tolist()}
        if self.se is not None:
            d["se"] = self.se.tolist()
        return d


def mean_flow_from_feedback(
    spec: GameSpec, grid: TimeGrid, feedback, n_paths: int, seed: int, *, antithetic=False, alpha_max=50.0, threads=1
) -> MeanFlow:
    """Per-node sample mean of the state simulated under ``feedback``."""
    mean, se, _, _ = controlled_moments(
        spec, grid, feedback, n_paths, seed, n_players=1, alpha_max=alpha_max, antithetic=antithetic, threads=threads
    )
    return MeanFlow(np.array(grid.nodes), mean[:, 0], se[:, 0])


def representative_driver(flow: MeanFlow, grid: TimeGrid) -> Driver:
    m = np.asarray(flow.values)
    nodes = grid.nodes

    def evaluate(t, X, Z):
        k = int(round(t / grid.dt))
        m_t = m[k] if abs(nodes[k] - t) < 1e-12 else float(flow(t))
        return m_t - 0.5 * Z[:, :, 0] ** 2

    return Driver(1, 1, evaluate, "mfg-representative")


def _square(X):
    return X * X


@dataclass
class MFGSolution:
    """Mean field equilibrium computed by damped fixed-point iteration.

    ``trace`` holds the sup-norm flow update of every iteration.
    """

    spec: GameSpec
    numerics: Numerics
    flow: MeanFlow
    bsde: BSDESolution
    value: float
    trace: list[float]
    damping: float
    residual: float | None = None
    residual_max_se: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.bsde.grid

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def feedback(self, k: int, t: float, X: np.ndarray) -> np.ndarray:
        """Equilibrium control ``-Z(t_k, x)``; ``X`` has shape ``(n, 1)``."""
        return optimal_control(self.bsde.z_at(k, X)[:, :, 0])

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "value": self.value,
            "value_cv": float(self.bsde.y0_cv[0]),
            "value_cv_se": float(self.bsde.y0_cv_se[0]),
            "iterations": self.iterations,
            "damping": self.damping,
            "trace": self.trace,
            "consistency_residual": self.residual,
            "consistency_max_se": self.residual_max_se,
            "flow": self.flow.to_dict(),
            "bsde": self.bsde.to_dict(),
            "diagnostics": self.diagnostics,
        }


def _solve_representative(paths, flow, grid, numerics):
    opts = SolveOptions(ridge=numerics.ridge, z_max=numerics.z_max, keep_paths=False)
    return solve_backward(paths, representative_driver(flow, grid), _square, Basis("polynomial", 2), opts)


def solve_mfg_fixed_point(
    spec: GameSpec,
    numerics: Numerics = Numerics(),
    damping: float | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
    *,
    flow_seed: int | None = None,
) -> MFGSolution:
    """Damped fixed-point iteration on the mean flow.

    Each sweep solves the representative BSDE on fixed reference paths,
    simulates ``numerics.mfg_paths`` antithetic paths under the resulting
    feedback with a fixed seed (so the map is deterministic), and mixes the
    new flow in with weight ``damping``.  Once an update falls below
    ``tol`` the last undamped map output is accepted and the BSDE is solved
    once more with it.

    Raises
    ------
    IterationFailure
        when ``max_iter`` sweeps do not bring the update below ``tol``.
    """
    lam = numerics.damping if damping is None else damping
    tol = numerics.tol if tol is None else tol
    max_iter = numerics.max_iter if max_iter is None else max_iter
    if not 0 < lam <= 1:
        raise InvalidArgument(f"damping must lie in (0, 1], got {lam}")
    grid = make_time_grid(spec.T, numerics.n_steps)
    rep = GameSpec(spec.T, spec.k, spec.x0, 1, spec.xi_var)
    paths = reference_paths(
        rep, grid, numerics.n_paths, numerics.seed, antithetic=numerics.antithetic, threads=numerics.threads
    )
    fseed = numerics.seed + 7 if flow_seed is None else flow_seed
    n_flow = numerics.mfg_paths + numerics.mfg_paths % 2

    flow = MeanFlow(np.array(grid.nodes), spec.x0 * np.exp(-spec.k * grid.nodes))
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        sol = _solve_representative(paths, flow, grid, numerics)

        def fb(k, t, X, sol=sol):
            return optimal_control(sol.z_at(k, X)[:, :, 0])

        new = mean_flow_from_feedback(
            rep, grid, fb, n_flow, fseed, antithetic=True, alpha_max=numerics.alpha_max, threads=numerics.threads
        )
        mixed = MeanFlow(flow.t, (1 - lam) * flow.values + lam * new.values, new.se)
        step = mixed.sup_distance(flow)
        trace.append(step)
        flow = mixed
        if step <= tol:
            # the damped iterate trails the map by (1 - lam) / lam * step;
            # the latest map output is the better fixed-point estimate
            flow = new
            converged = True
            break
    if not converged:
        raise IterationFailure(f"mean flow did not converge to tol={tol} in {max_iter} iterations", trace)
    sol = _solve_representative(paths, flow, grid, numerics)
    out = MFGSolution(spec, numerics, flow, sol, float(sol.y0[0]), trace, lam)
    out.diagnostics = {"z_clip_count": sol.z_clip_count, "max_cond": float(sol.cond.max())}
    return out


def consistency_residual(solution: MFGSolution, n_paths: int, seed: int, *, with_se: bool = False):
    """``sup_k |m_hat(t_k) - fresh sample mean|`` under the returned feedback.

    With ``with_se`` the largest per-node standard error of the fresh means
    is returned as well.
    """
    spec = solution.spec
    rep = GameSpec(spec.T, spec.k, spec.x0, 1, spec.xi_var)
    n = n_paths + n_paths % 2
    fresh = mean_flow_from_feedback(
        rep, solution.grid, solution.feedback, n, seed, antithetic=True, alpha_max=solution.numerics.alpha_max
    )
    res = float(np.max(np.abs(solution.flow.values - fresh.values)))
    if with_se:
        return res, float(np.max(fresh.se))
    return res


# ---------------------------------------------------------------- oracle


@dataclass
class MFGOracle:
    """``Y = A(t) x^2 + D(t)`` with equilibrium mean flow ``m``."""

    t: np.ndarray
    A: np.ndarray
    D: np.ndarray
    m: np.ndarray
    x0: float
    k: float

    @property
    def value(self) -> float:
        return float(self.A[0] * self.x0**2 + self.D[0])

    def feedback(self, k: int, X: np.ndarray) -> np.ndarray:
        return -2.0 * self.A[k] * X

    def to_csv(self, m_hat=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["t", "m_hat", "A", "D"] if m_hat is not None else ["t", "m", "A", "D"]
        w.writerow(head)
        mcol = self.m if m_hat is None else m_hat
        for row in zip(self.t, mcol, self.A, self.D):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def mfg_closed_form(spec: GameSpec, grid: TimeGrid, substeps: int = 20) -> MFGOracle:
    """Quadratic-ansatz equilibrium tabulated on ``grid``.

    ``A' = 2A^2 + 2kA`` (``A(T) = 1``) is integrated backward with RK4 on a
    half-step table, the mean ``m' = -(k + 2A) m`` (``m(0) = x0``) forward
    with RK4 whose stages read that table, and ``D' = -A - m``
    (``D(T) = 0``) by Simpson quadrature on the same points.  Each grid
    interval is split into ``substeps`` RK4 steps.
    """
    k, T = spec.k, spec.T
    M = 2 * grid.n_steps * substeps
    h = T / M

    A = np.empty(M + 1)
    A[-1] = 1.0
    for j in range(M, 0, -1):
        a = A[j]
        k1 = 2 * a * a + 2 * k * a
        b = a - h / 2 * k1
        k2 = 2 * b * b + 2 * k * b
        b = a - h / 2 * k2
        k3 = 2 * b * b + 2 * k * b
        b = a - h * k3
        k4 = 2 * b * b + 2 * k * b
        A[j - 1] = a - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    even = np.arange(0, M + 1, 2)
    m = np.empty(even.size)
    m[0] = spec.x0
    H = 2 * h
    for q, j in enumerate(even[:-1]):
        y = m[q]
        k1 = -(k + 2 * A[j]) * y
        k2 = -(k + 2 * A[j + 1]) * (y + H / 2 * k1)
        k3 = -(k + 2 * A[j + 1]) * (y + H / 2 * k2)
        k4 = -(k + 2 * A[j + 2]) * (y + H * k3)
        m[q + 1] = y + H / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    # D(t) = int_t^T (A + m) ds; Simpson needs m at odd points, use the
    # cubic Hermite midpoint built from the ODE slopes
    Ae = A[even]
    slope = -(k + 2 * Ae) * m
    m_mid = 0.5 * (m[:-1] + m[1:]) + H / 8 * (slope[:-1] - slope[1:])
    g_even = Ae + m
    g_mid = A[even[:-1] + 1] + m_mid
    pieces = H / 6 * (g_even[:-1] + 4 * g_mid + g_even[1:])
    D = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])

    idx = np.arange(0, even.size, substeps)
    return MFGOracle(np.array(grid.nodes), Ae[idx], D[idx], m[idx], spec.x0, k)
