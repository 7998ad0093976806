"""Oracle and invariant checks run by the ``validate`` command."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import zerosum
from .bsde import Basis, Driver, SolveOptions, solve_backward
from .convergence import empirical_w2
from .nplayer import oracle_residuals
from .sim import (
    ControlPath,
    GameSpec,
    girsanov_weight,
    make_time_grid,
    mean_and_se,
    simulate_reference,
)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def check_isaacs(n: int = 1000) -> Check:
    rng = np.random.default_rng(1)
    x, z = rng.uniform(-10, 10, n), rng.uniform(-10, 10, n)
    exact = bool(np.all(zerosum.H_plus(x, z) == x) and np.all(zerosum.H_minus(x, z) == x))
    hi, lo = zerosum.nested_grid_values(1.0, 2.0)
    ok = exact and abs(hi - 1.0) <= 1e-2 and abs(lo - 1.0) <= 1e-2
    return Check("isaacs", ok, f"H+=H-=x on {n} points: {exact}; nested grid {hi:.6f}, {lo:.6f}")


def check_girsanov(n_paths: int = 100_000, seed: int = 3) -> Check:
    grid = make_time_grid(1.0, 50)
    b = simulate_reference(GameSpec(1.0, 0.0, 0.0, 1), grid, n_paths, seed)
    ctrl = ControlPath(np.sin(b.states[:-1]) + 0.5, "feedback")
    m, se = mean_and_se(girsanov_weight(b, ctrl))
    ok = abs(m - 1.0) <= 3 * se
    return Check("girsanov-normalisation", bool(ok), f"E[w] = {m:.5f} +/- {se:.5f}")


def check_determinism(seed: int = 11) -> Check:
    grid = make_time_grid(1.0, 20)
    spec = GameSpec(1.0, 1.0, 0.5, 3)
    a = simulate_reference(spec, grid, 150_000, seed)
    b = simulate_reference(spec, grid, 150_000, seed, threads=3)
    c = simulate_reference(spec, grid, 150_000, seed + 1)
    ok = a.to_bytes() == b.to_bytes() and a.to_bytes() != c.to_bytes()
    return Check("seed-determinism", ok, "same seed bit-exact across thread counts; new seed differs")


def check_terminal(seed: int = 5) -> Check:
    grid = make_time_grid(1.0, 10)
    b = simulate_reference(GameSpec(1.0, 0.0, 1.0, 1), grid, 2000, seed)
    drv = Driver(1, 1, lambda t, X, Z: X[:, :1] - 0.5 * Z[:, :, 0] ** 2, "check")
    sol = solve_backward(b, drv, lambda X: X * X, Basis("polynomial", 2), SolveOptions())
    ok = bool(np.array_equal(sol.Y[-1, :, 0], b.states[-1, :, 0] ** 2))
    return Check("terminal-exactness", ok, "Y_K equals g(X_K) bit for bit")


def check_oracle_residuals(n_paths: int = 20_000, seed: int = 7) -> Check:
    r1, s1 = zerosum.oracle_residual(1.0, 1.0, 25, n_paths, seed)
    r2, s2 = zerosum.oracle_residual(1.0, 1.0, 50, n_paths, seed)
    ok_zs = r2 <= r1 / 2 + 2 * np.hypot(s1 / 2, s2)
    spec = GameSpec(1.0, 0.0, 1.0, 4)
    q1 = float(oracle_residuals(spec, 25, n_paths, seed).mean())
    q2 = float(oracle_residuals(spec, 50, n_paths, seed).mean())
    ok_np = q2 <= 0.55 * q1
    return Check(
        "oracle-residual-order",
        bool(ok_zs and ok_np),
        f"zero-sum {r1:.5f} -> {r2:.5f}; N-player {q1:.5f} -> {q2:.5f} when dt halves",
    )


def check_w2_axioms(n_triples: int = 100, seed: int = 9) -> Check:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n_triples):
        a, b, c = (rng.normal(rng.normal(), rng.uniform(0.2, 2), 200) for _ in range(3))
        ab, ba = empirical_w2(a, b), empirical_w2(b, a)
        ok &= ab == ba and empirical_w2(a, a) == 0.0
        ok &= ab <= empirical_w2(a, c) + empirical_w2(c, b) + 1e-12
    return Check("w2-axioms", bool(ok), f"symmetry, identity, triangle on {n_triples} triples")


CHECKS = (
    check_isaacs,
    check_girsanov,
    check_determinism,
    check_terminal,
    check_oracle_residuals,
    check_w2_axioms,
)


def run_validation() -> list[Check]:
    return [c() for c in CHECKS]


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}" for c in checks]
    return "\n".join(lines)
