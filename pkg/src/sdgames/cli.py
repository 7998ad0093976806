"""Command-line front end.

``sdgames solve --config run.cfg --out results`` solves the game named by
the config's ``kind``; ``converge`` runs the population-size sweep and
``validate`` prints the oracle and invariant checks.  Artifacts are staged
in a scratch directory and moved into place only when the run succeeds; on
failure the output directory receives ``manifest.json`` and ``error.json``
only.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .errors import InvalidArgument, IterationFailure, NumericalFailure

EXIT_OK = 0
EXIT_FAILED_CHECKS = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ITERATION = 4
EXIT_LOCKED = 5

OWNED = ("report.json", "manifest.json", "error.json", "curves.csv", "riccati.csv", "mfg_flow.csv",
         "rate_table.csv", "rate_fit.json", "validate.json", "plots")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sdgames"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def _plot_curves(curves: dict, title: str, path: Path):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    t = curves["t"]
    for ax, name in zip(axes, ("Y", "Z")):
        ax.plot(t, curves[name], label="LSMC")
        ax.plot(t, curves[name + "_oracle"], "--", label="closed form")
        ax.set_xlabel("t")
        ax.set_ylabel(name)
        ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _plot_rates(table, path: Path):
    plt = _pyplot()
    N = table.N
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(N, table.column("value_gap_sq"), "o-", label="squared value gap")
    ax.loglog(N, table.column("oracle_value_gap") ** 2, "k--", lw=0.8, label="oracle")
    ax.loglog(N, table.column("w2_gap"), "s-", label="integrated W2^2 gap")
    ax.loglog(N, table.column("oracle_w2_gap"), "k:", lw=0.8, label="Gaussian oracle")
    ax.loglog(N, table.C_hat / N, color="grey", lw=0.8, label="C_hat / N")
    ax.set_xlabel("N")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


# ---------------------------------------------------------------- runs


def _curves_csv(curves: dict) -> str:
    cols = ["t", "Y", "Z", "Y_oracle", "Z_oracle"]
    lines = [",".join(cols)]
    for row in zip(*(curves[c] for c in cols)):
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _run_zerosum(cfg: RunConfig, stage: Path) -> dict:
    from . import zerosum

    spec, num = cfg.spec, cfg.numerics
    rep = zerosum.solve_saddle(spec, num)
    zerosum.deviation_test(rep)
    nash = zerosum.solve_nash_system_2p(spec, num)
    defect, scale = zerosum.antisymmetry_defect(nash)
    K = rep.grid.n_steps
    t = rep.grid.nodes[:K]
    x = np.full((1, 1), spec.x0)
    Y = [float(rep.bsde.y_at(k, x)[0, 0]) for k in range(K)]
    Z = [float(rep.bsde.z_at(k, x)[0, 0, 0]) for k in range(K)]
    exact = [zerosum.closed_form(tk, spec.x0, spec.T) for tk in t]
    curves = {"t": t, "Y": Y, "Z": Z, "Y_oracle": [e[0] for e in exact], "Z_oracle": [e[1] for e in exact]}
    (stage / "curves.csv").write_text(_curves_csv(curves))
    _plot_curves(curves, "zero-sum value along x = x0", stage / "plots" / "yz.svg")
    report = rep.to_dict()
    report["nash_system"] = {
        "Y1_0": float(nash.y0[0]),
        "Y2_0": float(nash.y0[1]),
        "antisymmetry_defect": defect,
        "max_abs_Y1": scale,
    }
    return report


def _run_nplayer(cfg: RunConfig, stage: Path) -> dict:
    from .nplayer import (
        DEFAULT_PERTURBATIONS,
        equilibrium_bundle,
        nash_deviation_gap,
        pooled_driver,
        riccati_oracle,
        solve_nash_system,
    )

    spec, num = cfg.spec, cfg.numerics
    sol = solve_nash_system(spec, num)
    orc = riccati_oracle(spec, sol.grid)
    bundle = equilibrium_bundle(sol)
    gaps = [nash_deviation_gap(sol, 0, p, bundle=bundle).to_dict() for p in DEFAULT_PERTURBATIONS]
    del bundle
    K, N, dt = sol.grid.n_steps, spec.n_players, sol.grid.dt
    X = np.full((1, N), spec.x0)
    Y, Z = [], []
    for k in range(K):
        zo, zc = sol.pooled.z_own_at(k, X), sol.pooled.z_cross_at(k, X)
        f = pooled_driver(sol.grid.nodes[k], X, zo, zc)
        Y.append(float(sol.pooled.yhat_at(k, X)[0, 0] + f[0, 0] * dt))
        Z.append(float(zo[0, 0]))
    curves = {
        "t": sol.grid.nodes[:K],
        "Y": Y,
        "Z": Z,
        "Y_oracle": (orc.A * spec.x0**2 + orc.C * spec.x0 + orc.D)[:K],
        "Z_oracle": (2 * orc.A * spec.x0 + orc.C / N)[:K],
    }
    (stage / "curves.csv").write_text(_curves_csv(curves))
    (stage / "riccati.csv").write_text(orc.to_csv())
    _plot_curves(curves, f"N = {N}: player value at the all-x0 state", stage / "plots" / "yz.svg")
    report = sol.to_dict()
    report["oracle_value"] = orc.value(spec.x0)
    report["deviations"] = gaps
    return report


def _run_mfg(cfg: RunConfig, stage: Path) -> dict:
    from .mfg import consistency_residual, mfg_closed_form, solve_mfg_fixed_point
    from .sim import make_time_grid

    spec, num = cfg.spec, cfg.numerics
    sol = solve_mfg_fixed_point(spec, num)
    res, se = consistency_residual(sol, num.mfg_paths, num.seed + 99, with_se=True)
    sol.residual, sol.residual_max_se = res, se
    orc = mfg_closed_form(spec, make_time_grid(spec.T, num.n_steps))
    K = sol.grid.n_steps
    m = sol.flow.values
    Y = [float(sol.bsde.y_at(k, np.full((1, 1), m[k]))[0, 0]) for k in range(K)]
    Z = [float(sol.bsde.z_at(k, np.full((1, 1), m[k]))[0, 0, 0]) for k in range(K)]
    curves = {
        "t": sol.grid.nodes[:K],
        "Y": Y,
        "Z": Z,
        "Y_oracle": (orc.A * m**2 + orc.D)[:K],
        "Z_oracle": (2 * orc.A * m)[:K],
    }
    (stage / "curves.csv").write_text(_curves_csv(curves))
    (stage / "mfg_flow.csv").write_text(orc.to_csv(m_hat=m))
    _plot_curves(curves, "mean field value along the mean flow", stage / "plots" / "yz.svg")
    report = sol.to_dict()
    report["oracle_value"] = orc.value
    report["oracle_flow"] = orc.m.tolist()
    return report


def _run_converge(cfg: RunConfig, stage: Path, timings: dict) -> dict:
    from .convergence import run_convergence_suite

    def progress(row):
        timings[f"N={row.N}"] = row.seconds

    table = run_convergence_suite(cfg.spec, cfg.numerics.n_list, cfg.numerics, progress=progress)
    (stage / "rate_table.csv").write_text(table.to_csv())
    (stage / "rate_fit.json").write_text(_dumps(table.sidecar()))
    _plot_rates(table, stage / "plots" / "value_gap.svg")
    return table.to_dict()


RUNNERS = {"zerosum": _run_zerosum, "nplayer": _run_nplayer, "mfg": _run_mfg}


# ---------------------------------------------------------------- orchestration


def _versions() -> dict:
    import matplotlib
    import scipy

    return {
        "sdgames": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Lock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InvalidArgument(f"output directory is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _clear_owned(out: Path):
    for name in OWNED:
        p = out / name
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()


def execute(cfg: RunConfig, *, command: str = "solve") -> int:
    """Run ``cfg`` and write its artifacts into ``cfg.out``; returns the exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seeds": {"paths": cfg.numerics.seed, "flow": cfg.numerics.seed + 7, "controlled": cfg.numerics.seed + 1},
        "versions": _versions(),
        "started_at": _now(),
    }
    timings: dict = {}
    try:
        lock = _Lock(out)
        lock.__enter__()
    except InvalidArgument as exc:
        print(json.dumps({"error": "locked", "message": str(exc)}), file=sys.stderr)
        return EXIT_LOCKED
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        if cfg.kind == "converge":
            report = _run_converge(cfg, stage, timings)
        else:
            report = RUNNERS[cfg.kind](cfg, stage)
        report_text = _dumps({"kind": cfg.kind, "report": report})
        (stage / "report.json").write_text(report_text)
        manifest["report_sha256"] = hashlib.sha256(report_text.encode()).hexdigest()
        manifest["artifacts"] = sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())
        manifest["status"] = "ok"
        code = EXIT_OK
        error = None
    except (NumericalFailure, IterationFailure) as exc:
        error = exc.to_dict()
        code = EXIT_NUMERICAL if isinstance(exc, NumericalFailure) else EXIT_ITERATION
    except InvalidArgument as exc:
        error = {"error": "invalid-argument", "message": str(exc)}
        code = EXIT_CONFIG
    try:
        manifest["finished_at"] = _now()
        timings["total"] = time.perf_counter() - started
        manifest["wall_clock_seconds"] = timings
        _clear_owned(out)
        if error is None:
            for p in sorted(stage.iterdir()):
                shutil.move(str(p), out / p.name)
        else:
            manifest["status"] = "failed"
            (out / "error.json").write_text(_dumps(error))
            print(json.dumps(error), file=sys.stderr)
        (out / "manifest.json").write_text(_dumps(manifest))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
        lock.__exit__(None, None, None)
    return code


def run_validate(out: str | None) -> int:
    from .validation import format_table, run_validation

    checks = run_validation()
    print(format_table(checks))
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "validate.json").write_text(_dumps([c.to_dict() for c in checks]))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED_CHECKS


def _summary(cfg: RunConfig) -> str:
    report = json.loads((Path(cfg.out) / "report.json").read_text())["report"]
    if cfg.kind == "converge":
        fits = report["fits"]
        return (
            f"value gap^2 slope {fits['value_gap_sq']['slope']:.3f}, "
            f"W2 gap slope {fits['w2_gap']['slope']:.3f}, C_hat {fits['C_hat']:.4g}"
        )
    key = "Y0" if cfg.kind == "zerosum" else "value"
    return f"{cfg.kind}: value {report[key]:.6f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdgames", description="Stochastic differential game solvers")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "solve the game named by the config"), ("converge", "run the N sweep")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", type=Path, help="configuration file (key=value lines)")
        s.add_argument("--out", type=Path, help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed, unsigned 64-bit")
        s.add_argument("--threads", type=int, help="worker threads; never changes results")
    v = sub.add_parser("validate", help="run oracle and invariant checks")
    v.add_argument("--config", type=Path, help="accepted for symmetry; checks use fixed settings")
    v.add_argument("--out", type=Path, help="directory for validate.json")
    v.add_argument("--seed", type=int, help="ignored")
    v.add_argument("--threads", type=int, help="ignored")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return run_validate(str(args.out) if args.out else None)
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text)
        kind = "converge" if args.command == "converge" else None
        cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, out=args.out, kind=kind)
    except (ConfigError, InvalidArgument) as exc:
        err = exc.to_dict() if isinstance(exc, ConfigError) else {"error": "invalid-argument", "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    code = execute(cfg, command=args.command)
    if code == EXIT_OK:
        print(_summary(cfg))
    return code


if __name__ == "__main__":
    sys.exit(main())
