"""Run configuration: a flat ``key=value`` dialect.

Entries are separated by newlines or by commas outside brackets.  Values are
JSON literals (numbers, ``true``/``false``, lists) or bare strings.  Numerics
settings may appear at top level, under a ``[numerics]`` section header, or
with a ``numerics.`` prefix.  ``#`` starts a comment.

Example::

    kind = converge
    T = 1
    x0 = 1
    [numerics]
    n_paths = 20000
    N_list = [2, 4, 8]
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .errors import InvalidArgument
from .sim import GameSpec, Numerics

KINDS = ("zerosum", "nplayer", "mfg", "converge")
GAME_KEYS = ("kind", "T", "k", "x0", "n_players", "xi_var", "out")
NUMERIC_FIELDS = {f.name: f for f in dataclasses.fields(Numerics)}
ALIASES = {"N_list": "n_list", "lambda": "damping", "lam": "damping"}


class ConfigError(InvalidArgument):
    """A configuration entry is unknown, mistyped or out of range."""

    def __init__(self, key: str, constraint: str, value=None):
        msg = f"{key}: {constraint}" + ("" if value is None else f" (got {value!r})")
        super().__init__(msg)
        self.key = key
        self.constraint = constraint

    def to_dict(self) -> dict:
        return {"error": "config", "key": self.key, "constraint": self.constraint, "message": str(self)}


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings with every default filled in."""

    kind: str = "zerosum"
    T: float = 1.0
    k: float = 0.0
    x0: float = 0.0
    n_players: int = 2
    xi_var: float = 0.0
    out: str = "out"
    numerics: Numerics = field(default_factory=Numerics)

    @property
    def spec(self) -> GameSpec:
        return GameSpec(self.T, self.k, self.x0, self.n_players, self.xi_var)

    def with_overrides(self, *, seed=None, threads=None, out=None, kind=None) -> "RunConfig":
        num = self.numerics
        if seed is not None:
            num = dataclasses.replace(num, seed=_check_seed("seed", seed))
        if threads is not None:
            if isinstance(threads, bool) or int(threads) != threads or threads < 1:
                raise ConfigError("threads", "must be an integer >= 1", threads)
            num = dataclasses.replace(num, threads=int(threads))
        cfg = dataclasses.replace(self, numerics=num, out=self.out if out is None else str(out))
        if kind is not None and kind != cfg.kind:
            raw = cfg.to_dict()
            raw["kind"] = kind
            raw.pop("n_players")
            cfg = build_config(raw)
        return cfg

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in GAME_KEYS}
        d["numerics"] = self.numerics.to_dict()
        return d


# ---------------------------------------------------------------- parsing


def _split_entries(line: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in line:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return [e.strip() for e in out if e.strip()]


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text


def parse_entries(text: str) -> dict:
    """Raw ``{key: value}`` mapping; numerics keys are nested under ``numerics``."""
    raw: dict = {}
    num: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]") and "=" not in line:
            section = line[1:-1].strip()
            if section != "numerics":
                raise ConfigError(f"[{section}]", "unknown section; only [numerics] is allowed")
            continue
        for entry in _split_entries(line):
            if "=" not in entry:
                raise ConfigError(entry, f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in entry.split("=", 1))
            key = ALIASES.get(key, key)
            target = raw
            if key.startswith("numerics."):
                key = ALIASES.get(key[len("numerics."):], key[len("numerics."):])
                target = num
            elif section == "numerics" or key in NUMERIC_FIELDS:
                target = num
            if key in target:
                raise ConfigError(key, "given more than once")
            target[key] = _literal(value)
    if num:
        raw["numerics"] = num
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text.

    Raises
    ------
    ConfigError
        naming the offending key and the violated constraint.
    """
    return build_config(parse_entries(text))


# ---------------------------------------------------------------- validation


def _real(key, v, *, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, "must be a number", v)
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(key, "must be finite", v)
    if positive and not v > 0:
        raise ConfigError(key, "must be > 0", v)
    if nonneg and v < 0:
        raise ConfigError(key, "must be >= 0", v)
    return v


def _int(key, v, lo):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        else:
            raise ConfigError(key, "must be an integer", v)
    if v < lo:
        raise ConfigError(key, f"must be >= {lo}", v)
    return int(v)


def _check_seed(key, v):
    v = _int(key, v, 0)
    if v >= 2**64:
        raise ConfigError(key, "must be < 2^64", v)
    return v


_INT_MIN = {"n_steps": 1, "n_paths": 2, "max_iter": 1, "mfg_paths": 2, "w2_samples": 2, "max_players": 2, "threads": 1}
_POSITIVE = {"z_max", "alpha_max", "tol"}


def _numerics(raw: dict) -> Numerics:
    vals = {}
    for key, v in raw.items():
        if key not in NUMERIC_FIELDS:
            raise ConfigError(f"numerics.{key}", "unknown key")
        if key == "seed":
            vals[key] = _check_seed(key, v)
        elif key in _INT_MIN:
            vals[key] = _int(key, v, _INT_MIN[key])
        elif key == "antithetic":
            if not isinstance(v, bool):
                raise ConfigError(key, "must be true or false", v)
            vals[key] = v
        elif key == "n_list":
            if not isinstance(v, list) or not v:
                raise ConfigError("N_list", "must be a non-empty list of integers", v)
            ns = [_int("N_list", n, 2) for n in v]
            if any(b <= a for a, b in zip(ns, ns[1:])):
                raise ConfigError("N_list", "must be strictly increasing", v)
            vals[key] = tuple(ns)
        elif key == "damping":
            d = _real(key, v)
            if not 0 < d <= 1:
                raise ConfigError(key, "must lie in (0, 1]", v)
            vals[key] = d
        elif key in _POSITIVE:
            vals[key] = _real(key, v, positive=True)
        else:
            vals[key] = _real(key, v, nonneg=True)
    num = Numerics(**vals)
    if num.antithetic and num.n_paths % 2:
        raise ConfigError("n_paths", "must be even with antithetic sampling", num.n_paths)
    if num.n_list[-1] > num.max_players:
        raise ConfigError("N_list", f"entries must be <= max_players={num.max_players}", list(num.n_list))
    return num


def build_config(raw: dict) -> RunConfig:
    """Validate a raw mapping (as produced by :func:`parse_entries`)."""
    for key in raw:
        if key not in GAME_KEYS and key != "numerics":
            raise ConfigError(key, "unknown key")
    kind = raw.get("kind", "zerosum")
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {', '.join(KINDS)}", kind)
    T = _real("T", raw.get("T", 1.0), positive=True)
    k = _real("k", raw.get("k", 0.0), nonneg=True)
    x0 = _real("x0", raw.get("x0", 0.0))
    xi_var = _real("xi_var", raw.get("xi_var", 0.0), nonneg=True)
    num = _numerics(raw.get("numerics", {}))
    default_players = {"zerosum": 2, "nplayer": 2, "mfg": 1, "converge": 1}[kind]
    n_players = _int("n_players", raw.get("n_players", default_players), 1)
    if kind == "zerosum":
        if n_players != 2:
            raise ConfigError("n_players", "must be 2 for kind=zerosum", n_players)
        if k != 0:
            raise ConfigError("k", "must be 0 for kind=zerosum", k)
    if kind == "nplayer" and not 2 <= n_players <= num.max_players:
        raise ConfigError("n_players", f"must lie in [2, {num.max_players}] for kind=nplayer", n_players)
    if kind in ("mfg", "converge") and n_players != 1:
        raise ConfigError("n_players", f"must be 1 for kind={kind}", n_players)
    out = raw.get("out", "out")
    if not isinstance(out, str) or not out:
        raise ConfigError("out", "must be a non-empty path string", out)
    return RunConfig(kind, T, k, x0, n_players, xi_var, out, num)
