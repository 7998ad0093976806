"""Symmetric N-player linear-quadratic game.

Player ``i`` controls the drift of ``dX^i = (-k X^i + a^i) dt + dW^i`` and
minimises ``E[int (|a^i|^2 / 2 + S_t) dt + |X^i_T|^2]`` where ``S`` is the
population mean.  The equilibrium is characterised by an N-equation BSDE
system.  Written under the reference (driftless) measure, after collecting
the Girsanov drift of every opponent playing ``a^j = -Z^{jj}``, its drivers
are

    f^i = S - |Z^{ii}|^2 / 2 - sum_{j != i} Z^{ij} Z^{jj}.

With the ansatz ``Y^i = A x_i^2 + C S + D`` the system reduces to the
Riccati-type ODEs solved by :func:`riccati_oracle`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import Basis, PooledSolution, SolveOptions, solve_backward_exchangeable
from .errors import InvalidArgument
from .sim import (
    ControlPath,
    GameSpec,
    Numerics,
    TimeGrid,
    girsanov_weight,
    make_time_grid,
    mean_and_se,
    reference_paths,
    simulate_controlled,
)


def equilibrium_driver(i: int, x_vec, z_row, z_diag) -> float:
    """Reference-measure driver of equation ``i`` at one state.

    Parameters
    ----------
    i : int
        Equation (player) index.
    x_vec : (N,) states.
    z_row : (N,) the row ``Z^{i,.}``.
    z_diag : (N,) the diagonal ``Z^{jj}``.
    """
    x_vec = np.asarray(x_vec, dtype=np.float64)
    z_row = np.asarray(z_row, dtype=np.float64)
    z_diag = np.asarray(z_diag, dtype=np.float64)
    N = x_vec.shape[0]
    if z_row.shape != (N,) or z_diag.shape != (N,):
        raise InvalidArgument(f"expected Z vectors of length {N}, got {z_row.shape} and {z_diag.shape}")
    if not 0 <= i < N:
        raise InvalidArgument(f"player index {i} outside 0..{N - 1}")
    cross = float(z_row @ z_diag - z_row[i] * z_diag[i])
    return float(x_vec.mean() - 0.5 * z_row[i] ** 2 - cross)


def pooled_driver(t, X, z_own, z_cross):
    """Vectorised driver for exchangeable solutions.

    ``z_own[:, i]`` is ``Z^{ii}`` and ``z_cross[:, i]`` the common value of
    ``Z^{ij}``, ``j != i``.
    """
    S = X.mean(axis=1, keepdims=True)
    out = S - 0.5 * z_own * z_own
    if z_cross is not None:
        out -= z_cross * (z_own.sum(axis=1, keepdims=True) - z_own)
    return out


def _terminal(X):
    return X * X


# ---------------------------------------------------------------- Riccati oracle


@dataclass
class RiccatiCoefficients:
    """Coefficients of ``Y^i = A x_i^2 + B x_i + C S + D`` on a grid."""

    t: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    n_players: int
    k: float
    substeps: int = 20

    def value(self, x0: float) -> float:
        return float(self.A[0] * x0 * x0 + self.B[0] * x0 + self.C[0] * x0 + self.D[0])

    def feedback(self, k: int, X: np.ndarray) -> np.ndarray:
        return -(2.0 * self.A[k] * X + self.B[k] + self.C[k] / self.n_players)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "A", "B", "C", "D"])
        for row in zip(self.t, self.A, self.B, self.C, self.D):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_players": self.n_players,
            "k": self.k,
            "method": f"RK4, {self.substeps} substeps per grid interval",
            "t": self.t.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
        }


def _rk4_backward(rhs, yT, t, substeps):
    """Integrate ``y' = rhs(t, y)`` from ``t[-1]`` back to ``t[0]``."""
    out = np.empty((len(t), len(yT)))
    y = np.array(yT, dtype=np.float64)
    out[-1] = y
    for n in range(len(t) - 1, 0, -1):
        h = (t[n - 1] - t[n]) / substeps
        s = t[n]
        for _ in range(substeps):
            k1 = rhs(s, y)
            k2 = rhs(s + h / 2, y + h / 2 * k1)
            k3 = rhs(s + h / 2, y + h / 2 * k2)
            k4 = rhs(s + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            s += h
        out[n - 1] = y
    return out


def riccati_oracle(spec: GameSpec, grid: TimeGrid, substeps: int = 20) -> RiccatiCoefficients:
    """Quadratic-ansatz solution of the N-player system.

    ``A' = 2A^2 + 2kA``, ``B' = (2A + k) B``, ``C' = (2A + k) C - 1``,
    ``D' = -A + C^2 (2N - 1) / (2N^2)`` with ``A(T) = 1`` and ``B, C, D``
    vanishing at ``T``.  Integrated backward with RK4.
    """
    N, k = spec.n_players, spec.k
    q = (2 * N - 1) / (2.0 * N * N)

    def rhs(_, y):
        A, B, C, _D = y
        return np.array([2 * A * A + 2 * k * A, (2 * A + k) * B, (2 * A + k) * C - 1.0, -A + q * C * C])

    sol = _rk4_backward(rhs, [1.0, 0.0, 0.0, 0.0], np.asarray(grid.nodes), substeps)
    return RiccatiCoefficients(np.array(grid.nodes), sol[:, 0], sol[:, 1], sol[:, 2], sol[:, 3], N, k, substeps)


# ---------------------------------------------------------------- LSMC solve


@dataclass
class NPlayerSolution:
    """Equilibrium of the N-player game computed by pooled LSMC.

    ``value`` is the regression value at the all-``x0`` state, shared by
    every player.  ``values`` are per-player pathwise averages of ``Y^i_0``
    over the design's initial states (with standard errors); they serve as
    an exchangeability check.
    """

    spec: GameSpec
    numerics: Numerics
    pooled: PooledSolution
    value: float
    values: np.ndarray
    values_se: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.pooled.grid

    def feedback(self, k: int, t: float, X: np.ndarray) -> np.ndarray:
        """Equilibrium controls ``-Z^{ii}`` of all players at node ``k``."""
        return -self.pooled.z_own_at(k, X)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "value": self.value,
            "value_cv": self.pooled.y0_cv,
            "value_cv_se": self.pooled.y0_cv_se,
            "player_values": self.values.tolist(),
            "player_values_se": self.values_se.tolist(),
            "bsde": self.pooled.to_dict(),
            "diagnostics": self.diagnostics,
        }


def design_paths(spec: GameSpec, numerics: Numerics):
    """Reference paths used as regression design for the pooled solvers.

    Initial states get a common shift of size ``numerics.design_spread`` so
    that the population-mean direction is well resolved at early nodes.
    """
    grid = make_time_grid(spec.T, numerics.n_steps)
    return reference_paths(
        spec,
        grid,
        numerics.n_paths,
        numerics.seed,
        antithetic=numerics.antithetic,
        threads=numerics.threads,
        spread=numerics.design_spread,
    )


def solve_nash_system(spec: GameSpec, numerics: Numerics = Numerics(), *, paths=None) -> NPlayerSolution:
    """Solve the N-player system on reference paths with the symmetric basis."""
    N = spec.n_players
    if N < 2:
        raise InvalidArgument("solve_nash_system needs n_players >= 2")
    if N > numerics.max_players:
        raise InvalidArgument(f"n_players={N} exceeds the cap max_players={numerics.max_players}")
    grid = make_time_grid(spec.T, numerics.n_steps)
    if paths is None:
        paths = design_paths(spec, numerics)
    opts = SolveOptions(ridge=numerics.ridge, z_max=numerics.z_max, keep_paths=False)
    pooled = solve_backward_exchangeable(
        paths, pooled_driver, _terminal, Basis("symmetric"), opts, cross=True, name="nplayer-equilibrium", x_eval=spec.x0
    )
    diag = {
        "z_clip_count": pooled.z_clip_count,
        "max_cond": float(pooled.cond.max()),
        "player_value_spread": float(np.ptp(pooled.y0_player_mean)),
    }
    return NPlayerSolution(spec, numerics, pooled, pooled.y0, pooled.y0_player_mean, pooled.y0_player_se, diag)


def player_value(solution: NPlayerSolution, i: int) -> float:
    """Regression value of ``Y^i`` at node 0 and the all-``x0`` state."""
    if not 0 <= i < solution.spec.n_players:
        raise InvalidArgument(f"player index {i} outside 0..{solution.spec.n_players - 1}")
    return solution.value


# ---------------------------------------------------------------- deviations


@dataclass(frozen=True)
class Perturbation:
    """Unilateral deviation: ``shift`` adds a constant, ``scale`` multiplies."""

    kind: str
    amount: float

    def apply(self, alpha: np.ndarray) -> np.ndarray:
        if self.kind == "shift":
            return alpha + self.amount
        if self.kind == "scale":
            return alpha * self.amount
        raise InvalidArgument(f"unknown perturbation kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}{self.amount:+g}" if self.kind == "shift" else f"scale{self.amount:g}"


DEFAULT_PERTURBATIONS = (
    Perturbation("shift", 0.25),
    Perturbation("shift", -0.25),
    Perturbation("shift", 0.5),
    Perturbation("shift", -0.5),
    Perturbation("scale", 0.8),
    Perturbation("scale", 1.2),
)


@dataclass
class DeviationResult:
    perturbation: Perturbation
    player: int
    gap: float
    se: float

    def to_dict(self) -> dict:
        return {"perturbation": self.perturbation.label, "player": self.player, "gap": self.gap, "se": self.se}


def equilibrium_bundle(solution: NPlayerSolution, n_paths: int | None = None, seed: int | None = None):
    """Paths of the system with every player on the equilibrium feedback."""
    num = solution.numerics
    return simulate_controlled(
        solution.spec,
        solution.grid,
        solution.feedback,
        n_paths or num.n_paths,
        num.seed + 1 if seed is None else seed,
        alpha_max=num.alpha_max,
        threads=num.threads,
        label="nplayer-equilibrium",
    )


def _player_cost(bundle, alpha, i):
    dt = bundle.grid.dt
    K = bundle.grid.n_steps
    run = np.zeros(bundle.n_paths)
    for k in range(K):
        run += (0.5 * alpha[k, :, i] ** 2 + bundle.state(k).mean(axis=1)) * dt
    return run + bundle.state(K)[:, i] ** 2


def nash_deviation_gap(solution: NPlayerSolution, i: int, perturbation: Perturbation, bundle=None) -> DeviationResult:
    """Cost change of player ``i`` when it alone deviates from equilibrium.

    The paths are simulated once under the equilibrium profile; the
    deviation is priced by tilting that measure with the Girsanov density of
    the control difference, so only player ``i``'s change enters the weight.
    Both costs are evaluated on the same paths and the standard error is
    that of the pathwise difference.
    """
    if bundle is None:
        bundle = equilibrium_bundle(solution)
    N = bundle.n_players
    if not 0 <= i < N:
        raise InvalidArgument(f"player index {i} outside 0..{N - 1}")
    K = bundle.grid.n_steps
    alpha = np.empty((K, bundle.n_paths, N))
    for k in range(K):
        alpha[k] = np.clip(solution.feedback(k, 0.0, bundle.state(k)), -solution.numerics.alpha_max, solution.numerics.alpha_max)
    base = _player_cost(bundle, alpha, i)
    delta = np.zeros_like(alpha)
    delta[:, :, i] = perturbation.apply(alpha[:, :, i]) - alpha[:, :, i]
    w = girsanov_weight(bundle, ControlPath(delta, "feedback"))
    alpha[:, :, i] += delta[:, :, i]
    pert = _player_cost(bundle, alpha, i)
    m, se = mean_and_se(w * pert - base)
    return DeviationResult(perturbation, i, float(m), float(se))


# ---------------------------------------------------------------- checks


def feedback_agreement(solution: NPlayerSolution, oracle: RiccatiCoefficients, bundle) -> tuple[float, float]:
    """Time-averaged mean-squared feedback error and oracle second moment,
    both evaluated on ``bundle``'s states (nodes ``0..K-1``)."""
    K = bundle.grid.n_steps
    err = mom = 0.0
    for k in range(K):
        X = bundle.state(k)
        ref = oracle.feedback(k, X)
        err += float(np.mean((solution.feedback(k, 0.0, X) - ref) ** 2))
        mom += float(np.mean(ref**2))
    return err / K, mom / K


def oracle_residuals(spec: GameSpec, n_steps: int, n_paths: int, seed: int) -> np.ndarray:
    """One-step residuals of the discretised system evaluated at the oracle.

    For every node and path, ``Y_k - Y_{k+1} - f_k dt + sum_j Z^{ij}_k dW^j_k``
    is formed with the oracle ``Y``, ``Z``; returns the mean absolute
    residual per node for player 0.
    """
    grid = make_time_grid(spec.T, n_steps)
    orc = riccati_oracle(spec, grid)
    paths = reference_paths(spec, grid, n_paths, seed)
    N, dt = spec.n_players, grid.dt
    out = np.empty(n_steps)
    for k in range(n_steps):
        X, Xn, dW = paths.state(k), paths.state(k + 1), paths.increment(k)

        def y(j, Z):
            return orc.A[j] * Z[:, 0] ** 2 + orc.C[j] * Z.mean(axis=1) + orc.D[j]

        z_own = 2 * orc.A[k] * X + orc.C[k] / N
        z_cross = np.full_like(X, orc.C[k] / N)
        f = pooled_driver(grid.nodes[k], X, z_own, z_cross if N > 1 else None)[:, 0]
        mart = z_own[:, 0] * dW[:, 0] + (orc.C[k] / N) * (dW.sum(axis=1) - dW[:, 0])
        out[k] = np.mean(np.abs(y(k, X) - y(k + 1, Xn) - f * dt + mart))
    return out
