"""Time grids, path simulation and Girsanov weights.

Random numbers are counter based.  The standard normal that drives player
``j`` on path ``p`` during step ``k`` is a pure function of
``(seed, j, k, lane, p)``: a Philox key is derived from
``(seed, j, k, lane)`` and path ``p`` reads the ``p``-th 64-bit draw of that
stream, mapped through the inverse normal CDF.  Any partition of the paths
into worker blocks therefore reproduces the serial result bit for bit, and a
one-player simulation sees exactly the noise of player 0 in an N-player
simulation with the same seed.

Under the reference measure the state follows the exact Ornstein-Uhlenbeck
transition of ``dX = -k X dt + dW``.  Controlled paths add the drift with an
exponential-Euler step ``X' = e^{-k dt} X + phi(dt) a + I`` where
``phi(dt) = (1 - e^{-k dt}) / k``; for ``k = 0`` this is Euler-Maruyama and
for ``a = 0`` it is the reference transition.

Path arrays are stored node-major: ``states`` has shape
``(n_steps + 1, n_paths, n_players)`` and ``increments`` has shape
``(n_steps, n_paths, n_players)``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgument, NumericalFailure

BLOCK_PATHS = 1 << 16
DEFAULT_ALPHA_MAX = 50.0

# lanes of the counter-based streams
LANE_DW = 0
LANE_OU = 1
LANE_XI = 2
LANE_SPREAD = 3

_MAGIC = b"SDGPATH1"

Feedback = Callable[[int, float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_K = T``."""

    T: float
    n_steps: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (isinstance(self.T, (int, float)) and math.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"T must be > 0, got {self.T!r}")
        if isinstance(self.n_steps, bool) or not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be an integer >= 1, got {self.n_steps!r}")
        nodes = np.arange(self.n_steps + 1, dtype=np.float64) * (float(self.T) / self.n_steps)
        nodes[-1] = float(self.T)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dt(self) -> float:
        return float(self.T) / self.n_steps

    def to_dict(self) -> dict:
        return {"T": float(self.T), "n_steps": int(self.n_steps)}


def make_time_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(T, n_steps)


@dataclass(frozen=True)
class GameSpec:
    """Parameters of the running linear-quadratic example.

    The cost structure is fixed: quadratic effort ``|a|^2 / 2``, running cost
    equal to the population mean of the states (the state itself for the
    two-player game) and terminal cost ``|X_T|^2``.  ``xi_var > 0`` makes the
    initial state Gaussian with mean ``x0``; the oracles assume a point mass.
    """

    T: float = 1.0
    k: float = 0.0
    x0: float = 0.0
    n_players: int = 1
    xi_var: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"T must be > 0, got {self.T!r}")
        if not (math.isfinite(self.k) and self.k >= 0):
            raise InvalidArgument(f"k must be >= 0, got {self.k!r}")
        if not math.isfinite(self.x0):
            raise InvalidArgument(f"x0 must be finite, got {self.x0!r}")
        if isinstance(self.n_players, bool) or int(self.n_players) != self.n_players or self.n_players < 1:
            raise InvalidArgument(f"n_players must be an integer >= 1, got {self.n_players!r}")
        if not (math.isfinite(self.xi_var) and self.xi_var >= 0):
            raise InvalidArgument(f"xi_var must be >= 0, got {self.xi_var!r}")

    def to_dict(self) -> dict:
        return {"T": self.T, "k": self.k, "x0": self.x0, "n_players": self.n_players, "xi_var": self.xi_var}


@dataclass(frozen=True)
class Numerics:
    """Discretisation and Monte Carlo settings shared by the solvers."""

    n_steps: int = 50
    n_paths: int = 100_000
    seed: int = 20240611
    ridge: float = 1e-8
    z_max: float = 100.0
    alpha_max: float = DEFAULT_ALPHA_MAX
    damping: float = 0.5
    tol: float = 1e-4
    max_iter: int = 50
    n_list: tuple = (2, 4, 8, 16, 32, 64)
    mfg_paths: int = 1_000_000
    w2_samples: int = 10_000
    max_players: int = 64
    threads: int = 1
    antithetic: bool = True
    design_spread: float = 0.5

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["n_list"] = list(self.n_list)
        return d


# ---------------------------------------------------------------- random numbers


def _stream_key(seed: int, player: int, step: int, lane: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(player), int(step), int(lane)))
    return ss.generate_state(2, np.uint64)


def _uniforms(key: np.ndarray, start: int, stop: int) -> np.ndarray:
    bitgen = np.random.Philox(key=key)
    # one Philox counter value yields four 64-bit draws
    bitgen.advance(start // 4)
    skip = start % 4
    raw = bitgen.random_raw(stop - start + skip)[skip:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(
    seed: int, player: int, step: int, lane: int, start: int, stop: int, threads: int = 1
) -> np.ndarray:
    """Normals for paths ``start..stop-1`` of one counter-based stream."""
    key = _stream_key(seed, player, step, lane)
    if threads <= 1 or stop - start <= BLOCK_PATHS:
        return ndtri(_uniforms(key, start, stop))
    edges = list(range(start, stop, BLOCK_PATHS)) + [stop]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda ab: ndtri(_uniforms(key, ab[0], ab[1])), zip(edges[:-1], edges[1:])))
    return np.concatenate(parts)


def _path_normals(seed, player, step, lane, n_paths, antithetic, threads):
    if not antithetic:
        return standard_normals(seed, player, step, lane, 0, n_paths, threads)
    half = n_paths // 2
    z = standard_normals(seed, player, step, lane, 0, half, threads)
    return np.concatenate([z, -z])


@dataclass(frozen=True)
class _Transition:
    decay: float
    phi: float
    noise_coef: float
    noise_sd: float


def _transition(k: float, dt: float) -> _Transition:
    if k == 0:
        return _Transition(1.0, dt, 1.0, 0.0)
    decay = math.exp(-k * dt)
    phi = -math.expm1(-k * dt) / k
    var_i = -math.expm1(-2.0 * k * dt) / (2.0 * k)
    # I = int e^{-k(t'-s)} dW_s has Cov(I, dW) = phi
    return _Transition(decay, phi, phi / dt, math.sqrt(max(var_i - phi * phi / dt, 0.0)))


class _NoiseSource:
    """Regenerates the Brownian increments and OU noise of any step on demand."""

    def __init__(self, spec, grid, n_paths, seed, n_players, antithetic, threads, spread=0.0):
        if not (math.isfinite(spread) and spread >= 0):
            raise InvalidArgument(f"spread must be >= 0, got {spread!r}")
        if isinstance(n_paths, bool) or int(n_paths) != n_paths or n_paths < 1:
            raise InvalidArgument(f"n_paths must be an integer >= 1, got {n_paths!r}")
        if antithetic and n_paths % 2:
            raise InvalidArgument("antithetic sampling needs an even n_paths")
        if not (0 <= int(seed) < 2**64):
            raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.spec = spec
        self.grid = grid
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self.n_players = int(n_players)
        self.antithetic = bool(antithetic)
        self.threads = int(threads)
        self.spread = float(spread)
        self.tr = _transition(spec.k, grid.dt)
        self._sqdt = math.sqrt(grid.dt)

    def _normals(self, step, lane):
        out = np.empty((self.n_paths, self.n_players))
        for j in range(self.n_players):
            out[:, j] = _path_normals(self.seed, j, step, lane, self.n_paths, self.antithetic, self.threads)
        return out

    def initial(self) -> np.ndarray:
        x = np.full((self.n_paths, self.n_players), float(self.spec.x0))
        if self.spec.xi_var > 0:
            x += math.sqrt(self.spec.xi_var) * self._normals(0, LANE_XI)
        if self.spread > 0:
            # one shift shared by all players of a path (regression design only)
            common = _path_normals(self.seed, 0, 0, LANE_SPREAD, self.n_paths, self.antithetic, self.threads)
            x += self.spread * common[:, None]
        return x

    def draw(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Brownian increment and exact OU noise term of ``step``."""
        dw = self._sqdt * self._normals(step, LANE_DW)
        if self.tr.noise_sd == 0.0 and self.tr.noise_coef == 1.0:
            return dw, dw
        noise = self.tr.noise_coef * dw
        if self.tr.noise_sd > 0:
            noise += self.tr.noise_sd * self._normals(step, LANE_OU)
        return dw, noise


# ---------------------------------------------------------------- path containers


@dataclass
class PathBundle:
    """Fully materialised paths (node-major arrays, see module docstring)."""

    grid: TimeGrid
    increments: np.ndarray
    states: np.ndarray
    seed: int
    measure_tag: str = "P"
    antithetic: bool = False
    clip_count: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def n_players(self) -> int:
        return self.states.shape[2]

    def state(self, k: int) -> np.ndarray:
        return self.states[k]

    def increment(self, k: int) -> np.ndarray:
        return self.increments[k]

    def to_bytes(self) -> bytes:
        """Columnar binary layout.

        ``b"SDGPATH1"``, a little-endian uint64 header length, a UTF-8 JSON
        header (grid, n_paths, n_players, seed, measure_tag, antithetic,
        clip_count), then every ``(player, step)`` increment column of length
        n_paths and every ``(player, node)`` state column, all little-endian
        float64, players outermost.
        """
        header = json.dumps(
            {
                "grid": self.grid.to_dict(),
                "n_paths": self.n_paths,
                "n_players": self.n_players,
                "seed": self.seed,
                "measure_tag": self.measure_tag,
                "antithetic": self.antithetic,
                "clip_count": self.clip_count,
            },
            sort_keys=True,
        ).encode()
        inc = np.ascontiguousarray(self.increments.transpose(2, 0, 1), dtype="<f8")
        st = np.ascontiguousarray(self.states.transpose(2, 0, 1), dtype="<f8")
        return _MAGIC + len(header).to_bytes(8, "little") + header + inc.tobytes() + st.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PathBundle":
        if blob[:8] != _MAGIC:
            raise InvalidArgument("not a serialised PathBundle")
        hlen = int.from_bytes(blob[8:16], "little")
        head = json.loads(blob[16 : 16 + hlen])
        grid = TimeGrid(head["grid"]["T"], head["grid"]["n_steps"])
        n, p, K = head["n_paths"], head["n_players"], grid.n_steps
        body = np.frombuffer(blob, dtype="<f8", offset=16 + hlen)
        ninc = p * K * n
        if body.size != ninc + p * (K + 1) * n:
            raise InvalidArgument("truncated PathBundle payload")
        inc = body[:ninc].reshape(p, K, n).transpose(1, 2, 0).astype(np.float64)
        st = body[ninc:].reshape(p, K + 1, n).transpose(1, 2, 0).astype(np.float64)
        return cls(grid, inc, st, head["seed"], head["measure_tag"], head["antithetic"], head["clip_count"])


class StreamedPaths:
    """Reference-measure paths regenerated on demand.

    Only checkpoint states are kept; ``state(k)`` and ``increment(k)``
    recompute the segment around ``k`` from the nearest checkpoint with the
    same counter-based streams, so values equal those of
    :func:`simulate_reference` exactly.  Memory is ``O(n_paths * n_players *
    sqrt(n_steps))``.
    """

    def __init__(
        self, spec, grid, n_paths, seed, *, n_players=None, antithetic=False, threads=1, segment=None, spread=0.0
    ):
        self.grid = grid
        self._src = _NoiseSource(spec, grid, n_paths, seed, n_players or spec.n_players, antithetic, threads, spread)
        self.seed = int(seed)
        self.measure_tag = "P"
        self.antithetic = bool(antithetic)
        self.clip_count = 0
        K = grid.n_steps
        self._seg = int(segment or max(1, math.isqrt(K)))
        self._checkpoints = {}
        x = self._src.initial()
        for k in range(K + 1):
            if k % self._seg == 0:
                self._checkpoints[k] = x.copy()
            if k < K:
                _, noise = self._src.draw(k)
                x = self._src.tr.decay * x + noise
        self._cache_start = None
        self._cache_states = []
        self._cache_incs = []

    @property
    def n_paths(self) -> int:
        return self._src.n_paths

    @property
    def n_players(self) -> int:
        return self._src.n_players

    def _load(self, k):
        start = (k // self._seg) * self._seg
        if start == self._cache_start:
            return
        self._cache_start = None
        self._cache_states = []
        self._cache_incs = []
        K = self.grid.n_steps
        x = self._checkpoints[start]
        states, incs = [x], []
        for j in range(start, min(start + self._seg, K)):
            dw, noise = self._src.draw(j)
            incs.append(dw)
            x = self._src.tr.decay * x + noise
            states.append(x)
        self._cache_start, self._cache_states, self._cache_incs = start, states, incs

    def state(self, k: int) -> np.ndarray:
        if k % self._seg == 0 and k in self._checkpoints and self._cache_start != k:
            return self._checkpoints[k]
        self._load(k)
        return self._cache_states[k - self._cache_start]

    def increment(self, k: int) -> np.ndarray:
        self._load(k)
        return self._cache_incs[k - self._cache_start]


PathSource = Union[PathBundle, StreamedPaths]


# ---------------------------------------------------------------- simulation


def simulate_reference(
    spec, grid, n_paths, seed, *, n_players=None, antithetic=False, threads=1, spread=0.0
) -> PathBundle:
    """Paths of ``dX = -k X dt + dW`` under the reference measure.

    ``spread > 0`` adds ``spread * eta`` to every player's initial state,
    with one standard normal ``eta`` per path.  This widens the regression
    design along the population mean; solvers then read values off the
    fitted functions at the point of interest instead of off path averages.
    """
    src = _NoiseSource(spec, grid, n_paths, seed, n_players or spec.n_players, antithetic, threads, spread)
    K = grid.n_steps
    states = np.empty((K + 1, src.n_paths, src.n_players))
    incs = np.empty((K, src.n_paths, src.n_players))
    states[0] = src.initial()
    for k in range(K):
        incs[k], noise = src.draw(k)
        states[k + 1] = src.tr.decay * states[k] + noise
    return PathBundle(grid, incs, states, int(seed), "P", bool(antithetic))


def reference_paths(
    spec, grid, n_paths, seed, *, n_players=None, antithetic=False, threads=1, spread=0.0, max_elements=20_000_000
):
    """In-memory bundle when small, :class:`StreamedPaths` otherwise."""
    p = n_players or spec.n_players
    kw = dict(n_players=p, antithetic=antithetic, threads=threads, spread=spread)
    if n_paths * p * (grid.n_steps + 1) <= max_elements:
        return simulate_reference(spec, grid, n_paths, seed, **kw)
    return StreamedPaths(spec, grid, n_paths, seed, **kw)


def _clip(alpha, alpha_max):
    over = np.abs(alpha) > alpha_max
    count = int(np.count_nonzero(over))
    if count:
        alpha = np.clip(alpha, -alpha_max, alpha_max)
    return alpha, count


def _controlled_run(spec, grid, feedback, n_paths, seed, n_players, alpha_max, antithetic, threads):
    src = _NoiseSource(spec, grid, n_paths, seed, n_players or spec.n_players, antithetic, threads)
    tr = src.tr
    x = src.initial()
    for k in range(grid.n_steps):
        alpha = np.asarray(feedback(k, float(grid.nodes[k]), x), dtype=np.float64)
        if alpha.shape != x.shape:
            alpha = np.broadcast_to(alpha, x.shape)
        if not np.all(np.isfinite(alpha)):
            raise NumericalFailure(f"feedback returned non-finite values at step {k}", module="sim", index=k)
        alpha, clipped = _clip(alpha, alpha_max)
        dw, noise = src.draw(k)
        x_next = tr.decay * x + tr.phi * alpha + noise
        yield k, x, alpha, dw, clipped
        x = x_next
    yield grid.n_steps, x, None, None, 0


def simulate_controlled(
    spec,
    grid,
    feedback: Feedback,
    n_paths,
    seed,
    *,
    n_players=None,
    alpha_max=DEFAULT_ALPHA_MAX,
    antithetic=False,
    threads=1,
    label="feedback",
) -> PathBundle:
    """Paths of ``dX = (-k X + a(t, X)) dt + dW`` simulated directly.

    ``feedback(k, t_k, states)`` returns the controls for all players;
    values are clipped to ``|a| <= alpha_max`` and clip events are counted.
    """
    p = n_players or spec.n_players
    K = grid.n_steps
    states = np.empty((K + 1, n_paths, p))
    incs = np.empty((K, n_paths, p))
    clips = 0
    for k, x, _, dw, c in _controlled_run(spec, grid, feedback, n_paths, seed, p, alpha_max, antithetic, threads):
        states[k] = x
        if dw is not None:
            incs[k] = dw
        clips += c
    return PathBundle(grid, incs, states, int(seed), f"P^alpha[{label}]", bool(antithetic), clips)


def controlled_moments(
    spec, grid, feedback, n_paths, seed, *, n_players=None, alpha_max=DEFAULT_ALPHA_MAX, antithetic=False, threads=1
):
    """Per-node sample mean, its standard error and the sample variance of
    the controlled states, without storing paths.

    Returns ``(mean, se, var, clip_count)``, each array of shape
    ``(n_steps + 1, n_players)``.
    """
    p = n_players or spec.n_players
    K = grid.n_steps
    mean = np.empty((K + 1, p))
    se = np.empty((K + 1, p))
    var = np.empty((K + 1, p))
    clips = 0
    for k, x, _, _, c in _controlled_run(spec, grid, feedback, n_paths, seed, p, alpha_max, antithetic, threads):
        mean[k], se[k] = mean_and_se(x, antithetic)
        var[k] = x.var(axis=0, ddof=1)
        clips += c
    return mean, se, var, clips


def mean_and_se(values: np.ndarray, antithetic: bool = False):
    """Sample mean over axis 0 and its standard error.

    Antithetic samples are averaged in pairs ``(p, p + n/2)`` first.
    """
    values = np.asarray(values, dtype=np.float64)
    if antithetic:
        half = values.shape[0] // 2
        values = 0.5 * (values[:half] + values[half:])
    n = values.shape[0]
    m = values.mean(axis=0)
    if n < 2:
        return m, np.zeros_like(m)
    return m, values.std(axis=0, ddof=1) / math.sqrt(n)


# ---------------------------------------------------------------- weak formulation


@dataclass
class ControlPath:
    """Controls tabulated on a bundle, shape ``(n_steps, n_paths, n_players)``."""

    values: np.ndarray
    provenance: str = "tabulated"
    clip_count: int = 0


def tabulate_feedback(bundle: PathSource, feedback: Feedback, alpha_max=DEFAULT_ALPHA_MAX) -> ControlPath:
    """Evaluate a feedback at the left end point of every step of ``bundle``."""
    K = bundle.grid.n_steps
    out = np.empty((K, bundle.n_paths, bundle.n_players))
    clips = 0
    for k in range(K):
        a = np.asarray(feedback(k, float(bundle.grid.nodes[k]), bundle.state(k)), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericalFailure(f"feedback returned non-finite values at step {k}", module="sim", index=k)
        out[k], c = _clip(np.broadcast_to(a, out[k].shape), alpha_max)
        clips += c
    return ControlPath(out, "feedback", clips)


def log_girsanov_weight(bundle: PathBundle, controls: ControlPath) -> np.ndarray:
    inc = bundle.increments
    a = controls.values
    if a.shape != inc.shape:
        raise InvalidArgument(f"control table shape {a.shape} does not match the bundle grid {inc.shape}")
    dt = bundle.grid.dt
    return np.sum(a * inc, axis=(0, 2)) - 0.5 * dt * np.sum(a * a, axis=(0, 2))


def girsanov_weight(bundle: PathBundle, controls: ControlPath) -> np.ndarray:
    """Per-path density of the controlled measure w.r.t. the reference one,
    with left-point controls."""
    return np.exp(log_girsanov_weight(bundle, controls))


def reweighted_cost(bundle: PathBundle, controls: ControlPath, cost) -> tuple[float, float]:
    """Weak-formulation expectation ``E^{P^a}[cost]`` as a weighted
    reference-measure average; returns ``(estimate, standard_error)``.

    ``cost`` is a per-path array or a callable ``cost(bundle) -> array``.
    """
    w = girsanov_weight(bundle, controls)
    c = np.asarray(cost(bundle) if callable(cost) else cost, dtype=np.float64)
    if c.shape != w.shape:
        raise InvalidArgument(f"cost has shape {c.shape}, expected {w.shape}")
    m, se = mean_and_se(w * c, bundle.antithetic)
    return float(m), float(se)


def control_samples(
    spec, grid, feedback, n_paths, seed, *, n_players=None, player=0, alpha_max=DEFAULT_ALPHA_MAX, threads=1
) -> np.ndarray:
    """Controls of one player at nodes ``0..K-1`` along simulated paths.

    Only the requested column is stored, shape ``(n_steps, n_paths)``.
    Because streams are keyed by player index, player 0 of an N-player run
    and a one-player run with the same seed share their noise.
    """
    p = n_players or spec.n_players
    if not 0 <= player < p:
        raise InvalidArgument(f"player index {player} outside 0..{p - 1}")
    out = np.empty((grid.n_steps, n_paths))
    for k, _, alpha, _, _ in _controlled_run(spec, grid, feedback, n_paths, seed, p, alpha_max, False, threads):
        if alpha is not None:
            out[k] = alpha[:, player]
    return out
