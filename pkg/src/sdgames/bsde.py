"""Least-squares Monte Carlo backward solver for systems of BSDEs.

The scheme is the explicit one-step recursion

    Z^{ij}_k = E[(Y^i_{k+1} - Yhat^i_k) dW^j_k | X_k] / dt
    Y^i_k    = Yhat^i_k + f^i(t_k, X_k, Z_k) dt,   Yhat^i_k = E[Y^i_{k+1} | X_k]

with conditional expectations replaced by ridge regressions on a small
polynomial basis.  Subtracting the fitted ``Yhat`` before multiplying by the
Brownian increment leaves the target's conditional mean unchanged (``Yhat``
is known at ``t_k`` and ``E[dW | X_k] = 0``) but removes most of its
variance.

Two front ends share the regression machinery: :func:`solve_backward` for a
generic system driven by a full state vector, and
:func:`solve_backward_exchangeable` for symmetric N-player systems, where one
set of coefficients is fitted on rows pooled over all players.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidArgument, NumericalFailure
from .sim import TimeGrid, mean_and_se

COND_MAX = 1e14


@dataclass(frozen=True)
class Driver:
    """Generator ``f(t, X, Z)`` of a BSDE system.

    ``evaluate`` maps ``t`` (float), states ``(n, n_state)`` and
    ``Z`` of shape ``(n, n_equations, n_brownian)`` to drifts ``(n, n_equations)``.
    """

    n_equations: int
    n_brownian: int
    evaluate: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    name: str = "driver"


@dataclass(frozen=True)
class SolveOptions:
    ridge: float = 1e-8
    z_max: float = 100.0
    cond_max: float = COND_MAX
    keep_paths: bool = True


# ---------------------------------------------------------------- bases


@dataclass(frozen=True)
class Basis:
    """Polynomial feature families.

    ``polynomial``
        all monomials of total degree <= ``degree`` in the state coordinates.
    ``symmetric``
        pooled rows ``{1, x_i, S, x_i^2, x_i S, S^2}`` with ``S`` the
        population mean, for exchangeable N-player systems.
    ``individual``
        pooled rows ``{1, x_i, ..., x_i^degree}``.

    Coordinates are centred and scaled at every node before the features
    are formed; this is an affine change of variables, so the spanned space
    is unchanged, but the normal equations stay well conditioned.  A
    coordinate with zero spread (a point-mass start) maps to zero.
    """

    kind: str = "polynomial"
    degree: int = 2

    def __post_init__(self):
        if self.kind not in ("polynomial", "symmetric", "individual"):
            raise InvalidArgument(f"unknown basis kind {self.kind!r}")
        if self.degree < 1:
            raise InvalidArgument("basis degree must be >= 1")
        if self.kind == "symmetric" and self.degree != 2:
            raise InvalidArgument("the symmetric basis is quadratic")

    @property
    def pooled(self) -> bool:
        return self.kind != "polynomial"

    def exponents(self, n_coords: int) -> list[tuple[int, ...]]:
        if self.kind == "symmetric":
            return [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        if self.kind == "individual":
            return [(p,) for p in range(self.degree + 1)]
        out = [(0,) * n_coords]
        for deg in range(1, self.degree + 1):
            out.extend(e for e in _exponents(n_coords, deg))
        return out

    def dim(self, n_coords: int = 1) -> int:
        return len(self.exponents(n_coords))

    def coordinates(self, X: np.ndarray) -> np.ndarray:
        """Raw coordinates, ``(n_coords, rows)``.

        Pooled kinds stack players: row ``i * n_paths + p`` is player ``i``
        on path ``p``.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if self.kind == "polynomial":
            return X.T
        xi = X.T.reshape(1, -1)
        if self.kind == "individual":
            return xi
        s = np.tile(X.mean(axis=1), X.shape[1])
        return np.vstack([xi, s[None, :]])

    def fit_scaling(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        center = coords.mean(axis=1)
        scale = coords.std(axis=1)
        tiny = scale <= 1e-12 * (1.0 + np.abs(center))
        scale = np.where(tiny, np.inf, scale)
        return center, scale

    def features(self, coords: np.ndarray, center, scale) -> np.ndarray:
        """Feature matrix ``(d, rows)`` for already extracted coordinates."""
        u = (coords - center[:, None]) / scale[:, None]
        exps = self.exponents(coords.shape[0])
        F = np.empty((len(exps), coords.shape[1]))
        for r, e in enumerate(exps):
            row = F[r]
            row.fill(1.0)
            for c, p in enumerate(e):
                for _ in range(p):
                    row *= u[c]
        return F


def _exponents(n: int, deg: int):
    if n == 1:
        yield (deg,)
        return
    for first in range(deg, -1, -1):
        for rest in _exponents(n - 1, deg - first):
            yield (first,) + rest


# ---------------------------------------------------------------- regression


class _NormalEquations:
    """Cholesky-factored ``F W F^T + lambda I`` shared by several targets.

    With row weights ``W`` the ridge scales with their sum.
    """

    def __init__(self, F: np.ndarray, ridge: float, cond_max: float = COND_MAX, node: int | None = None, weights=None):
        d, n = F.shape
        if weights is None:
            G = F @ F.T
            G[np.diag_indices(d)] += ridge * n
        else:
            G = (F * weights) @ F.T
            G[np.diag_indices(d)] += ridge * float(weights.sum())
        if not np.all(np.isfinite(G)):
            raise NumericalFailure("non-finite normal equations", module="bsde", index=node)
        self.cond = float(np.linalg.cond(G))
        if not math.isfinite(self.cond) or self.cond > cond_max:
            raise NumericalFailure(
                f"regression is rank deficient after ridge (cond={self.cond:.3g})", module="bsde", index=node
            )
        self._factor = cho_factor(G)
        self.F = F
        self.node = node

    def fit(self, target: np.ndarray) -> np.ndarray:
        coef = cho_solve(self._factor, self.F @ target)
        if not np.all(np.isfinite(coef)):
            raise NumericalFailure("non-finite regression coefficients", module="bsde", index=self.node)
        return coef


def regress(values, features, ridge: float = 1e-8) -> np.ndarray:
    """Ridge least squares of ``values`` on the columns of ``features``.

    Parameters
    ----------
    values : (n,) array
    features : (n, d) array
    ridge : float
        Relative ridge; ``ridge * n`` is added to the diagonal of the normal
        equations.

    Returns
    -------
    (d,) coefficient vector.
    """
    values = np.asarray(values, dtype=np.float64)
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    n, d = F.shape
    if values.shape != (n,):
        raise InvalidArgument(f"values have shape {values.shape}, expected ({n},)")
    if n < 10 * d:
        raise InvalidArgument(f"need n_paths >= 10 * d_basis = {10 * d}, got {n}")
    return _NormalEquations(F.T, ridge).fit(values)


# ---------------------------------------------------------------- solutions


@dataclass
class BSDESolution:
    """Output of :func:`solve_backward`.

    ``y_coef[k, i]`` are the coefficients of ``E[Y^i_{k+1} | X_k]`` and
    ``z_coef[k, i, j]`` those of ``Z^{ij}_k`` in the node-``k`` features.
    The per-path tables ``Y`` (``(K+1, n, E)``) and ``Z`` (``(K, n, E, B)``)
    are kept only when requested.
    """

    grid: TimeGrid
    basis: Basis
    driver: Driver
    y_coef: np.ndarray
    z_coef: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    y0: np.ndarray
    y0_mean: np.ndarray
    y0_se: np.ndarray
    y0_cv: np.ndarray
    y0_cv_se: np.ndarray
    cond: np.ndarray
    z_clip_count: int
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    pathwise: np.ndarray | None = field(default=None, repr=False)
    z_max: float = 100.0

    @property
    def n_equations(self) -> int:
        return self.y_coef.shape[1]

    def _features(self, k, X):
        coords = self.basis.coordinates(X)
        return self.basis.features(coords, self.centers[k], self.scales[k])

    def z_at(self, k: int, X: np.ndarray) -> np.ndarray:
        """Fitted ``Z`` at node ``k`` for states ``(n, n_state)``; ``(n, E, B)``."""
        F = self._features(k, X)
        return np.einsum("ebd,dn->neb", self.z_coef[k], F)

    def y_at(self, k: int, X: np.ndarray) -> np.ndarray:
        """Fitted ``Y`` at node ``k < K``; ``(n, E)``."""
        F = self._features(k, X)
        z = np.clip(np.einsum("ebd,dn->neb", self.z_coef[k], F), -self.z_max, self.z_max)
        f = self.driver.evaluate(float(self.grid.nodes[k]), np.atleast_2d(X), z)
        return (self.y_coef[k] @ F).T + f * self.grid.dt

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "basis": {"kind": self.basis.kind, "degree": self.basis.degree},
            "driver": self.driver.name,
            "y0": self.y0.tolist(),
            "y0_mean": self.y0_mean.tolist(),
            "y0_se": self.y0_se.tolist(),
            "y0_cv": self.y0_cv.tolist(),
            "y0_cv_se": self.y0_cv_se.tolist(),
            "y_coef": self.y_coef.tolist(),
            "z_coef": self.z_coef.tolist(),
            "centers": _finite_list(self.centers),
            "scales": _finite_list(self.scales),
            "diagnostics": {"max_cond": float(self.cond.max()), "z_clip_count": int(self.z_clip_count)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _z_equations(F, increments, options, node):
    # E[Y dW | X] / E[dW^2 | X]: weighting the normal equations by dW^2 in
    # place of dividing by dt makes the estimate exact for targets linear in dW
    return _NormalEquations(F, options.ridge, options.cond_max, node=node, weights=increments * increments)


def _finite_list(a):
    return np.where(np.isfinite(a), a, 0.0).tolist()


def _check_finite(arr, what, node):
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what}", module="bsde", index=node)


def solve_backward(paths, driver: Driver, terminal, basis: Basis | None = None, options: SolveOptions | None = None) -> BSDESolution:
    """Solve a BSDE system backward on reference-measure paths.

    Parameters
    ----------
    paths : PathBundle or StreamedPaths
        Reference-measure paths; ``n_players`` is the number of Brownian
        motions and of state coordinates.
    driver : Driver
    terminal : callable
        ``terminal(X_T) -> (n, n_equations)``.
    basis, options
        Regression basis (quadratic polynomials by default) and numerics.
    """
    basis = basis or Basis()
    options = options or SolveOptions()
    if basis.pooled:
        raise InvalidArgument("pooled bases need solve_backward_exchangeable")
    grid = paths.grid
    K, dt, n = grid.n_steps, grid.dt, paths.n_paths
    E, B = driver.n_equations, driver.n_brownian
    if B != paths.n_players:
        raise InvalidArgument(f"driver has {B} Brownian motions, paths have {paths.n_players}")
    d = basis.dim(paths.n_players)
    if n < 10 * d:
        raise InvalidArgument(f"need n_paths >= 10 * d_basis = {10 * d}, got {n}")

    XT = paths.state(K)
    y = np.array(terminal(XT), dtype=np.float64).reshape(n, E)
    _check_finite(y, "terminal values", K)
    g = y.copy()
    acc_f = np.zeros((n, E))
    acc_zdw = np.zeros((n, E))
    y_coef = np.zeros((K, E, d))
    z_coef = np.zeros((K, E, B, d))
    centers = np.zeros((K, paths.n_players))
    scales = np.zeros((K, paths.n_players))
    cond = np.zeros(K)
    clips = 0
    Ytab = Ztab = None
    if options.keep_paths:
        Ytab = np.empty((K + 1, n, E))
        Ztab = np.empty((K, n, E, B))
        Ytab[K] = y

    for k in range(K - 1, -1, -1):
        X = paths.state(k)
        dW = paths.increment(k)
        coords = basis.coordinates(X)
        centers[k], scales[k] = basis.fit_scaling(coords)
        F = basis.features(coords, centers[k], scales[k])
        ne = _NormalEquations(F, options.ridge, options.cond_max, node=k)
        cond[k] = ne.cond
        yhat = np.empty((n, E))
        z = np.empty((n, E, B))
        for i in range(E):
            resid = y[:, i] - ne.fit(y[:, i]) @ F
            for j in range(B):
                z_coef[k, i, j] = _z_equations(F, dW[:, j], options, k).fit(resid * dW[:, j])
                z[:, i, j] = z_coef[k, i, j] @ F
            # martingale control variate: same conditional mean, far less noise
            y_coef[k, i] = ne.fit(y[:, i] - np.einsum("nb,nb->n", z[:, i, :], dW))
            yhat[:, i] = y_coef[k, i] @ F
        over = np.abs(z) > options.z_max
        if over.any():
            clips += int(over.sum())
            np.clip(z, -options.z_max, options.z_max, out=z)
        f = np.asarray(driver.evaluate(float(grid.nodes[k]), X, z), dtype=np.float64).reshape(n, E)
        _check_finite(f, "driver output", k)
        acc_f += f * dt
        acc_zdw += np.einsum("neb,nb->ne", z, dW)
        y = yhat + f * dt
        _check_finite(y, "values", k)
        if options.keep_paths:
            Ytab[k] = y
            Ztab[k] = z

    est = g + acc_f
    cv = est - acc_zdw
    anti = bool(getattr(paths, "antithetic", False))
    y0_mean, y0_se = mean_and_se(est, anti)
    y0_cv, y0_cv_se = mean_and_se(cv, anti)
    sol = BSDESolution(
        grid=grid,
        basis=basis,
        driver=driver,
        y_coef=y_coef,
        z_coef=z_coef,
        centers=centers,
        scales=scales,
        y0=np.zeros(E),
        y0_mean=y0_mean,
        y0_se=y0_se,
        y0_cv=y0_cv,
        y0_cv_se=y0_cv_se,
        cond=cond,
        z_clip_count=clips,
        Y=Ytab,
        Z=Ztab,
        pathwise=cv,
        z_max=options.z_max,
    )
    sol.y0 = sol.y_at(0, paths.state(0)[:1])[0]
    return sol


# ---------------------------------------------------------------- exchangeable systems


@dataclass
class PooledSolution:
    """Output of :func:`solve_backward_exchangeable`.

    Player ``i`` uses the shared coefficients with its own row of features.
    ``z_coef[k, 0]`` fits the own-noise coefficient ``Z^{ii}`` and, when
    cross terms are solved, ``z_coef[k, 1]`` the common value of
    ``Z^{ij}``, ``j != i``.
    """

    grid: TimeGrid
    basis: Basis
    n_players: int
    y_coef: np.ndarray
    z_coef: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    y0: float
    y0_player_mean: np.ndarray
    y0_player_se: np.ndarray
    y0_cv: float
    y0_cv_se: float
    cond: np.ndarray
    z_clip_count: int
    pathwise: np.ndarray | None = field(default=None, repr=False)
    driver_name: str = "driver"

    def _features(self, k, X):
        coords = self.basis.coordinates(X)
        return self.basis.features(coords, self.centers[k], self.scales[k])

    def z_own_at(self, k: int, X: np.ndarray) -> np.ndarray:
        """``Z^{ii}`` at node ``k`` for states ``(n, N)``; returns ``(n, N)``."""
        X = np.atleast_2d(X)
        F = self._features(k, X)
        return (self.z_coef[k, 0] @ F).reshape(X.shape[1], X.shape[0]).T

    def z_cross_at(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.z_coef.shape[1] < 2:
            return np.zeros_like(X, dtype=np.float64)
        F = self._features(k, X)
        return (self.z_coef[k, 1] @ F).reshape(X.shape[1], X.shape[0]).T

    def yhat_at(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        F = self._features(k, X)
        return (self.y_coef[k] @ F).reshape(X.shape[1], X.shape[0]).T

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "basis": {"kind": self.basis.kind, "degree": self.basis.degree},
            "driver": self.driver_name,
            "n_players": self.n_players,
            "y0": self.y0,
            "y0_cv": self.y0_cv,
            "y0_cv_se": self.y0_cv_se,
            "y0_player_mean": self.y0_player_mean.tolist(),
            "y0_player_se": self.y0_player_se.tolist(),
            "y_coef": self.y_coef.tolist(),
            "z_coef": self.z_coef.tolist(),
            "centers": _finite_list(self.centers),
            "scales": _finite_list(self.scales),
            "diagnostics": {"max_cond": float(self.cond.max()), "z_clip_count": int(self.z_clip_count)},
        }


def solve_backward_exchangeable(
    paths,
    driver,
    terminal,
    basis: Basis | None = None,
    options: SolveOptions | None = None,
    *,
    cross: bool = True,
    name: str = "driver",
    x_eval: float | None = None,
) -> PooledSolution:
    """Backward solve of a symmetric N-equation system with pooled regressions.

    Equation ``i`` is driven by player ``i``'s noise and features.  The
    own-noise coefficient ``Z^{ii}`` is fitted from ``resid_i dW^i`` with
    weights ``(dW^i)^2``; the cross coefficient (identical for all
    ``j != i`` by exchangeability) from ``resid_i O^i`` with weights
    ``(O^i)^2``, where ``O^i = sum_{j != i} dW^j``.  Each fit has the other
    term partialled out of its target.

    Parameters
    ----------
    driver : callable
        ``driver(t, X, z_own, z_cross) -> (n, N)``; ``z_cross`` is ``None``
        when ``cross`` is false.
    terminal : callable
        ``terminal(X_T) -> (n, N)``.
    x_eval : float, optional
        ``y0`` is the fitted value at the state with every coordinate equal
        to ``x_eval``; by default the first path's initial state is used.
    """
    basis = basis or Basis("symmetric")
    options = options or SolveOptions()
    if not basis.pooled:
        raise InvalidArgument("solve_backward_exchangeable needs a pooled basis")
    grid = paths.grid
    K, dt, n, N = grid.n_steps, grid.dt, paths.n_paths, paths.n_players
    if cross and N < 2:
        raise InvalidArgument("cross terms need at least two players")
    d = basis.dim()
    n_coords = 2 if basis.kind == "symmetric" else 1
    rows = n * N
    if rows < 10 * d:
        raise InvalidArgument(f"need at least {10 * d} pooled rows, got {rows}")
    nz = 2 if cross else 1

    # pooled arrays are player-major: (N, n)
    y = np.ascontiguousarray(np.asarray(terminal(paths.state(K)), dtype=np.float64).T)
    _check_finite(y, "terminal values", K)
    g = y.copy()
    acc_f = np.zeros((N, n))
    acc_zdw = np.zeros((N, n))
    y_coef = np.zeros((K, d))
    z_coef = np.zeros((K, nz, d))
    centers = np.zeros((K, n_coords))
    scales = np.zeros((K, n_coords))
    cond = np.zeros(K)
    clips = 0

    for k in range(K - 1, -1, -1):
        X = paths.state(k)
        dW = np.ascontiguousarray(paths.increment(k).T)
        coords = basis.coordinates(X)
        centers[k], scales[k] = basis.fit_scaling(coords)
        F = basis.features(coords, centers[k], scales[k])
        del coords
        ne = _NormalEquations(F, options.ridge, options.cond_max, node=k)
        cond[k] = ne.cond
        resid = y - (ne.fit(y.reshape(-1)) @ F).reshape(N, n)
        own_eq = _z_equations(F, dW.reshape(-1), options, k)
        z_coef[k, 0] = own_eq.fit((resid * dW).reshape(-1))
        z_own = (z_coef[k, 0] @ F).reshape(N, n)
        z_cross = None
        if cross:
            # the two noise directions are orthogonal in mean; partial each
            # fitted term out of the other's target (one pass of a joint fit)
            others = dW.sum(axis=0)[None, :] - dW
            cross_eq = _z_equations(F, others.reshape(-1), options, k)
            z_coef[k, 1] = cross_eq.fit(((resid - z_own * dW) * others).reshape(-1))
            z_cross = (z_coef[k, 1] @ F).reshape(N, n)
            del cross_eq
            z_coef[k, 0] = own_eq.fit(((resid - z_cross * others) * dW).reshape(-1))
            z_own = (z_coef[k, 0] @ F).reshape(N, n)
        del own_eq
        mart = z_own * dW
        if cross:
            mart += z_cross * others
        # martingale control variate: same conditional mean, far less noise
        y_coef[k] = ne.fit((y - mart).reshape(-1))
        yhat = (y_coef[k] @ F).reshape(N, n)
        del F, ne, resid
        for z in (z_own, z_cross):
            if z is not None:
                over = np.abs(z) > options.z_max
                if over.any():
                    clips += int(over.sum())
                    np.clip(z, -options.z_max, options.z_max, out=z)
        f = driver(float(grid.nodes[k]), X, z_own.T, None if z_cross is None else z_cross.T)
        f = np.asarray(f, dtype=np.float64).T
        _check_finite(f, "driver output", k)
        acc_f += f * dt
        acc_zdw += z_own * dW
        if cross:
            acc_zdw += z_cross * others
        y = yhat + f * dt
        _check_finite(y, "values", k)

    cv = (g + acc_f - acc_zdw).T  # (n, N)
    est = (g + acc_f).T
    anti = bool(getattr(paths, "antithetic", False))
    player_mean, player_se = mean_and_se(est, anti)
    cv_mean, cv_se = mean_and_se(cv.mean(axis=1), anti)
    sol = PooledSolution(
        grid=grid,
        basis=basis,
        n_players=N,
        y_coef=y_coef,
        z_coef=z_coef,
        centers=centers,
        scales=scales,
        y0=0.0,
        y0_player_mean=player_mean,
        y0_player_se=player_se,
        y0_cv=float(cv_mean),
        y0_cv_se=float(cv_se),
        cond=cond,
        z_clip_count=clips,
        pathwise=cv,
        driver_name=name,
    )
    X0 = paths.state(0)[:1] if x_eval is None else np.full((1, N), float(x_eval))
    z_own0 = sol.z_own_at(0, X0)
    z_cross0 = sol.z_cross_at(0, X0) if cross else None
    f0 = np.asarray(driver(0.0, X0, z_own0, z_cross0), dtype=np.float64)
    sol.y0 = float(sol.yhat_at(0, X0)[0, 0] + f0[0, 0] * dt)
    return sol
