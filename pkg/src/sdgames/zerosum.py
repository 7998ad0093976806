"""Two-player zero-sum linear-quadratic game.

Both players push the drift of ``dX = (u + v) dt + dW``.  Player 1 pays
``J(u, v) = E[int (X + (u^2 - v^2) / 2) dt + X_T^2]`` and player 2 receives
it.  The Hamiltonians

    h1(x, z, u, v) = (u + v) z + (u^2 - v^2) / 2 + x
    h2(x, z, u, v) = (u + v) z + (v^2 - u^2) / 2 - x

satisfy the Isaacs condition ``inf_u sup_v h1 = sup_v inf_u h1 = x``, so the
value solves a single BSDE with driver ``x``.  Its explicit solution is
``Y_t = T - t + X_t^2 + (T - t) X_t`` with ``Z_t = 2 X_t + T - t``, and the
saddle feedback is ``(u, v) = (-Z, Z)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bsde import Basis, BSDESolution, Driver, SolveOptions, solve_backward
from .errors import InvalidArgument
from .sim import (
    ControlPath,
    GameSpec,
    Numerics,
    PathBundle,
    girsanov_weight,
    make_time_grid,
    mean_and_se,
    simulate_reference,
)

# ---------------------------------------------------------------- Hamiltonians


def h1(x, z, u, v):
    """Pre-Hamiltonian of the minimising player."""
    return (u + v) * z + 0.5 * (u * u - v * v) + x


def h2(x, z, u, v):
    """Pre-Hamiltonian of the maximising player written as a cost."""
    return (u + v) * z + 0.5 * (v * v - u * u) - x


def argmin_u(z):
    """Minimiser of ``u -> h1(x, z, u, v)``."""
    return -np.asarray(z, dtype=np.float64) if np.ndim(z) else -float(z)


def argmin_v(z):
    """Minimiser of ``v -> h2(x, z, u, v)``."""
    return -np.asarray(z, dtype=np.float64) if np.ndim(z) else -float(z)


def H1(x, z, v):
    """``inf_u h1(x, z, u, v) = v z - (z^2 + v^2) / 2 + x``."""
    return v * z - 0.5 * (z * z + v * v) + x


def H2(x, z, u):
    """``inf_v h2(x, z, u, v) = u z - (z^2 + u^2) / 2 - x``."""
    return u * z - 0.5 * (z * z + u * u) - x


def H_minus(x, z):
    """Lower Hamiltonian ``sup_v inf_u h1``; equal to ``x`` in closed form."""
    return x + 0.0 * z


def H_plus(x, z):
    """Upper Hamiltonian ``inf_u sup_v h1``; equal to ``x`` in closed form."""
    return x + 0.0 * z


def isaacs_gap(x, z):
    """``H_plus - H_minus``; identically zero."""
    return H_plus(x, z) - H_minus(x, z)


def grid_min_h1(x, z, v, lo=-10.0, hi=10.0, n=1001):
    """Brute-force ``(u*, min_u h1)`` over an equispaced grid of ``u``."""
    u = np.linspace(lo, hi, n)
    vals = h1(x, z, u, v)
    j = int(np.argmin(vals))
    return float(u[j]), float(vals[j])


def nested_grid_values(x, z, lo=-10.0, hi=10.0, n=401) -> tuple[float, float]:
    """``(inf_u sup_v h1, sup_v inf_u h1)`` by nested grid search."""
    g = np.linspace(lo, hi, n)
    table = h1(x, z, g[:, None], g[None, :])  # rows u, columns v
    return float(table.max(axis=1).min()), float(table.min(axis=0).max())


def nash_fixed_point(x, z1, z2) -> tuple[float, float]:
    """Equilibrium controls ``(-z1, -z2)`` of the two Hamiltonian minimisations."""
    return argmin_u(z1), argmin_v(z2)


def closed_form(t, x, T):
    """Explicit ``(Y, Z)`` of the value BSDE at time ``t`` and state ``x``."""
    tau = T - t
    return tau + x * x + tau * x, 2.0 * x + tau


# ---------------------------------------------------------------- saddle


def _check_spec(spec: GameSpec):
    if spec.n_players != 2:
        raise InvalidArgument(f"the zero-sum game has two players, got n_players={spec.n_players}")
    if spec.k != 0:
        raise InvalidArgument(f"the zero-sum example has undamped dynamics, got k={spec.k}")


def _single_state(spec):
    return GameSpec(spec.T, 0.0, spec.x0, 1, spec.xi_var)


def _value_driver():
    return Driver(1, 1, lambda t, X, Z: X[:, :1].copy(), "zerosum-value")


def _square(X):
    return X * X


@dataclass
class SaddleReport:
    """Value and saddle feedback of the zero-sum game.

    ``V_plus`` and ``V_minus`` both refer to the one BSDE value, since the
    upper and lower Hamiltonians coincide.
    """

    spec: GameSpec
    numerics: Numerics
    bsde: BSDESolution
    Y0: float
    Z0: float
    residual: float
    deviations: list = field(default_factory=list)

    @property
    def V_plus(self) -> float:
        return self.Y0

    @property
    def V_minus(self) -> float:
        return self.Y0

    @property
    def grid(self):
        return self.bsde.grid

    def feedback_u(self, k: int, t: float, X: np.ndarray) -> np.ndarray:
        return -self.bsde.z_at(k, X)[:, 0, :]

    def feedback_v(self, k: int, t: float, X: np.ndarray) -> np.ndarray:
        return self.bsde.z_at(k, X)[:, 0, :]

    def feedback_table(self, x_points=None) -> dict:
        """Saddle controls on a state grid at every node."""
        x = np.linspace(-2.0, 2.0, 9) if x_points is None else np.asarray(x_points, dtype=np.float64)
        K = self.grid.n_steps
        z = np.array([self.bsde.z_at(k, x[:, None])[:, 0, 0] for k in range(K)])
        return {"t": self.grid.nodes[:K].tolist(), "x": x.tolist(), "u": (-z).tolist(), "v": z.tolist()}

    def to_dict(self) -> dict:
        Y, Z = closed_form(0.0, self.spec.x0, self.spec.T)
        return {
            "spec": self.spec.to_dict(),
            "V_plus": self.V_plus,
            "V_minus": self.V_minus,
            "Y0": self.Y0,
            "Z0": self.Z0,
            "Y0_closed_form": Y,
            "Z0_closed_form": Z,
            "Y0_cv": float(self.bsde.y0_cv[0]),
            "Y0_cv_se": float(self.bsde.y0_cv_se[0]),
            "residual": self.residual,
            "feedback": self.feedback_table(),
            "deviations": [d.to_dict() for d in self.deviations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _bundle(spec, numerics, seed=None):
    grid = make_time_grid(spec.T, numerics.n_steps)
    return simulate_reference(
        _single_state(spec),
        grid,
        numerics.n_paths,
        numerics.seed if seed is None else seed,
        antithetic=numerics.antithetic,
        threads=numerics.threads,
    )


def solve_saddle(spec: GameSpec, numerics: Numerics = Numerics(), *, paths: PathBundle | None = None) -> SaddleReport:
    """Solve the value BSDE with driver ``x`` and read off the saddle.

    ``residual`` is the largest absolute error of the fitted ``Y`` against
    the explicit solution at the grid nodes ``0..K-1``, measured on the
    first 1000 paths.
    """
    _check_spec(spec)
    bundle = paths if paths is not None else _bundle(spec, numerics)
    opts = SolveOptions(ridge=numerics.ridge, z_max=numerics.z_max, keep_paths=False)
    sol = solve_backward(bundle, _value_driver(), _square, Basis("polynomial", 2), opts)
    X0 = np.full((1, 1), float(spec.x0))
    Y0 = float(sol.y_at(0, X0)[0, 0])
    Z0 = float(sol.z_at(0, X0)[0, 0, 0])
    K = bundle.grid.n_steps
    res = 0.0
    for k in range(K):
        X = bundle.state(k)[:1000]
        exact, _ = closed_form(bundle.grid.nodes[k], X[:, 0], spec.T)
        res = max(res, float(np.max(np.abs(sol.y_at(k, X)[:, 0] - exact))))
    return SaddleReport(spec, numerics, sol, Y0, Z0, res)


# ---------------------------------------------------------------- Nash system


def nash_driver(printed_cross_sign: bool = False) -> Driver:
    """Drivers of the two-equation Nash system under the reference measure.

    ``f1 = -Z2 Z1 - (Z1^2 + Z2^2) / 2 + x`` and
    ``f2 = -Z1 Z2 - (Z1^2 + Z2^2) / 2 - x``.  With ``printed_cross_sign`` the
    cross products enter with a plus sign instead; that variant is kept only
    for comparison and does not reproduce the saddle value.
    """
    s = 1.0 if printed_cross_sign else -1.0

    def evaluate(t, X, Z):
        z1, z2 = Z[:, 0, 0], Z[:, 1, 0]
        x = X[:, 0]
        quad = -0.5 * (z1 * z1 + z2 * z2)
        return np.stack([s * z1 * z2 + quad + x, s * z1 * z2 + quad - x], axis=1)

    return Driver(2, 1, evaluate, "zerosum-nash-printed" if printed_cross_sign else "zerosum-nash")


def _pair_terminal(X):
    x2 = X[:, :1] ** 2
    return np.concatenate([x2, -x2], axis=1)


def solve_nash_system_2p(
    spec: GameSpec, numerics: Numerics = Numerics(), *, printed_cross_sign: bool = False, paths=None
) -> BSDESolution:
    """Solve the coupled pair ``(Y1, Y2)`` on one Brownian motion.

    The per-path ``Y`` table is kept so that the anti-symmetry
    ``Y1 = -Y2`` can be checked with :func:`antisymmetry_defect`.
    """
    _check_spec(spec)
    bundle = paths if paths is not None else _bundle(spec, numerics)
    opts = SolveOptions(ridge=numerics.ridge, z_max=numerics.z_max, keep_paths=True)
    return solve_backward(bundle, nash_driver(printed_cross_sign), _pair_terminal, Basis("polynomial", 2), opts)


def antisymmetry_defect(sol: BSDESolution) -> tuple[float, float]:
    """``(max_t |mean(Y1_t + Y2_t)|, max |Y1|)`` over the stored table."""
    if sol.Y is None:
        raise InvalidArgument("solution has no stored Y table; solve with keep_paths=True")
    s = np.abs(sol.Y[:, :, 0].mean(axis=1) + sol.Y[:, :, 1].mean(axis=1))
    return float(s.max()), float(np.abs(sol.Y[:, :, 0]).max())


# ---------------------------------------------------------------- deviations


@dataclass(frozen=True)
class Deviation:
    """Perturbation of one player's saddle control.

    ``shift`` adds ``amount``; ``scale`` multiplies the feedback by ``amount``.
    """

    player: int
    kind: str
    amount: float

    def apply(self, a):
        if self.kind == "shift":
            return a + self.amount
        if self.kind == "scale":
            return a * self.amount
        raise InvalidArgument(f"unknown perturbation kind {self.kind!r}")

    @property
    def label(self) -> str:
        body = f"shift{self.amount:+g}" if self.kind == "shift" else f"scale{self.amount:g}"
        return f"p{self.player}:{body}"


def default_deviations() -> list[Deviation]:
    out = []
    for p in (1, 2):
        out += [Deviation(p, "shift", a) for a in (0.25, -0.25, 0.5, -0.5)]
        out += [Deviation(p, "scale", a) for a in (0.8, 1.2)]
    return out


@dataclass
class DeviationGap:
    deviation: Deviation
    gap: float
    se: float
    eps: float
    ok: bool

    def to_dict(self) -> dict:
        return {"perturbation": self.deviation.label, "gap": self.gap, "se": self.se, "eps": self.eps, "ok": self.ok}


def _cost(bundle, u, v):
    dt = bundle.grid.dt
    K = bundle.grid.n_steps
    run = np.zeros(bundle.n_paths)
    for k in range(K):
        run += (bundle.state(k)[:, 0] + 0.5 * (u[k] ** 2 - v[k] ** 2)) * dt
    return run + bundle.state(K)[:, 0] ** 2


def deviation_test(report: SaddleReport, perturbations=None, *, paths=None, n_sigma: float = 3.0) -> list[DeviationGap]:
    """Check the saddle inequalities for one-sided perturbations.

    Costs are priced under the reference measure with the Girsanov density
    of the total drift ``u + v``; baseline and perturbed costs share the
    paths, so the standard error is that of the pathwise difference.  A
    player-1 deviation passes when ``gap >= -eps``, a player-2 deviation
    when ``gap <= eps``, with ``eps = n_sigma * se``.
    """
    perturbations = default_deviations() if perturbations is None else list(perturbations)
    num = report.numerics
    bundle = paths if paths is not None else _bundle(report.spec, num, seed=num.seed + 1)
    K = bundle.grid.n_steps
    z = np.empty((K, bundle.n_paths))
    for k in range(K):
        z[k] = report.bsde.z_at(k, bundle.state(k))[:, 0, 0]
    u0, v0 = np.clip(-z, -num.alpha_max, num.alpha_max), np.clip(z, -num.alpha_max, num.alpha_max)

    def weight(u, v):
        return girsanov_weight(bundle, ControlPath((u + v)[:, :, None], "feedback"))

    base = weight(u0, v0) * _cost(bundle, u0, v0)
    out = []
    for d in perturbations:
        if d.player not in (1, 2):
            raise InvalidArgument(f"player must be 1 or 2, got {d.player}")
        u, v = (d.apply(u0), v0) if d.player == 1 else (u0, d.apply(v0))
        diff = weight(u, v) * _cost(bundle, u, v) - base
        gap, se = mean_and_se(diff, bundle.antithetic)
        gap, se = float(gap), float(se)
        eps = n_sigma * se
        ok = gap >= -eps if d.player == 1 else gap <= eps
        out.append(DeviationGap(d, gap, se, eps, bool(ok)))
    report.deviations = out
    return out


# ---------------------------------------------------------------- oracle residual


def oracle_residual(T: float, x0: float, n_steps: int, n_paths: int, seed: int) -> tuple[float, float]:
    """Mean absolute one-step residual of the explicit solution.

    Averages ``|Y_k - Y_{k+1} - x_k dt + Z_k dW_k|`` over nodes and paths
    and returns it with its standard error.
    """
    grid = make_time_grid(T, n_steps)
    b = simulate_reference(GameSpec(T, 0.0, x0, 1), grid, n_paths, seed)
    acc = np.zeros(n_paths)
    for k in range(n_steps):
        x, xn, dw = b.states[k, :, 0], b.states[k + 1, :, 0], b.increments[k, :, 0]
        y, z = closed_form(grid.nodes[k], x, T)
        yn, _ = closed_form(grid.nodes[k + 1], xn, T)
        acc += np.abs(y - yn - x * grid.dt + z * dw)
    m, se = mean_and_se(acc / n_steps)
    return float(m), float(se)
