"""Simulation of measure flows driven by bounded drifts and unit noise.

Random numbers come from independent streams keyed by ``(seed, stream,
block)`` where a block is a fixed range of path indices, so the output never
depends on how paths are later split between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .measures import DiscreteMeasure, wasserstein1

__all__ = [
    "DriftFn",
    "MeasureFlow",
    "GirsanovWeight",
    "time_grid",
    "brownian_increments",
    "simulate_flow",
    "simulate_mkv_flow",
    "girsanov_weights",
    "gaussian_score",
    "kde_score",
    "silverman_bandwidth",
    "zero_drift",
    "constant_drift",
    "DRIFT_REGISTRY",
    "make_drift",
]

BLOCK = 1024
STREAM_INCREMENTS = 0
STREAM_INITIAL = 1


@dataclass(frozen=True)
class DriftFn:
    """Bounded drift ``B(t, x)`` with optional measure dependence.

    Attributes
    ----------
    eval : callable
        ``(t, x) -> array``; for measure-dependent drifts this is the drift
        evaluated at the law frozen by the caller and may be ``None``.
    bound : float
        Declared sup-norm bound.
    mkv : callable, optional
        ``(t, x, m) -> array`` measure-dependent form.
    dx : callable, optional
        ``(t, x, m) -> array`` spatial derivative (``m`` ignored when the
        drift is measure-free).
    const : float, optional
        Set when the drift is a constant, enabling exact Gaussian scores.
    time_profile : callable, optional
        ``t -> c(t)`` when the drift depends on time only.
    mean_field : tuple, optional
        ``(dphi_dv, tests)`` describing a cylinder drift
        ``phi(t, x, <c_1, m>, ...)``: ``dphi_dv(t, x, m)`` returns an array
        with a trailing axis of size ``q`` and ``tests`` lists ``(c_q, c_q')``.
        Then ``d_y flat_m B(t, x, m)(y) = sum_q dphi_dv[..., q] c_q'(y)``.
    """

    eval: Callable | None
    bound: float
    name: str = "custom"
    mkv: Callable | None = None
    dx: Callable | None = None
    const: float | None = None
    time_profile: Callable | None = None
    mean_field: tuple | None = None

    @property
    def measure_dependent(self) -> bool:
        return self.mkv is not None and self.eval is None

    def __call__(self, t, x, m: DiscreteMeasure | None = None):
        if self.mkv is not None and (self.eval is None or m is not None):
            if m is None:
                raise ConfigurationError("measure-dependent drift needs a law")
            return self.mkv(t, x, m)
        return self.eval(t, x)

    def derivative(self, t, x, m: DiscreteMeasure | None = None):
        if self.dx is None:
            if self.const is not None or self.time_profile is not None:
                return np.zeros_like(np.asarray(x, dtype=float))
            raise ConfigurationError(f"drift {self.name!r} has no spatial derivative")
        return self.dx(t, x, m)

    def check_bound(self, times: np.ndarray, m: DiscreteMeasure | None = None) -> None:
        ts = np.asarray(times, dtype=float)
        ts = ts[:: max(1, ts.size // 20)]
        xs = np.linspace(-10.0, 10.0, 201)
        for t in ts:
            if self.measure_dependent and m is None:
                return
            v = np.asarray(self(t, xs, m), dtype=float)
            if np.any(np.abs(v) > self.bound * (1 + 1e-12) + 1e-15) or not np.all(np.isfinite(v)):
                raise ConfigurationError(
                    f"drift {self.name!r} exceeds its declared bound {self.bound} at t={t:g}")


def zero_drift() -> DriftFn:
    return DriftFn(lambda t, x: np.zeros_like(np.asarray(x, dtype=float)), 0.0, "zero",
                   dx=lambda t, x, m=None: np.zeros_like(np.asarray(x, dtype=float)), const=0.0)


def constant_drift(c: float) -> DriftFn:
    return DriftFn(lambda t, x: np.full_like(np.asarray(x, dtype=float), c), abs(c), f"constant({c:g})",
                   dx=lambda t, x, m=None: np.zeros_like(np.asarray(x, dtype=float)), const=float(c))


def _tanh_drift(scale: float = 1.0) -> DriftFn:
    return DriftFn(lambda t, x: scale * np.tanh(x), abs(scale), "tanh",
                   dx=lambda t, x, m=None: scale / np.cosh(x) ** 2)


def _sin_tanh_drift(scale: float = 1.0) -> DriftFn:
    return DriftFn(lambda t, x: scale * np.sin(t) * np.tanh(x), abs(scale), "sin-tanh",
                   dx=lambda t, x, m=None: scale * np.sin(t) / np.cosh(x) ** 2)


def _piecewise_drift(level: float = 0.5, switch: float = 0.5) -> DriftFn:
    # +level before the switch time, -level after
    prof = lambda t: level if t < switch else -level
    return DriftFn(lambda t, x: np.full_like(np.asarray(x, dtype=float), prof(t)), abs(level), "piecewise",
                   dx=lambda t, x, m=None: np.zeros_like(np.asarray(x, dtype=float)), time_profile=prof)


DRIFT_REGISTRY: dict[str, Callable[..., DriftFn]] = {
    "zero": zero_drift,
    "constant": lambda c=0.5: constant_drift(c),
    "tanh": _tanh_drift,
    "sin-tanh": _sin_tanh_drift,
    "piecewise": _piecewise_drift,
}


def make_drift(name: str, **params) -> DriftFn:
    """Build a registered bounded drift by name."""
    if name not in DRIFT_REGISTRY:
        import difflib

        close = difflib.get_close_matches(name, DRIFT_REGISTRY, n=3)
        hint = f"; did you mean {', '.join(close)}?" if close else ""
        raise ConfigurationError(f"unknown drift {name!r}{hint}")
    return DRIFT_REGISTRY[name](**params)


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Euler paths whose column marginals represent the flow ``mu_t``.

    ``times[0]`` is the initial time ``t0``; the flow is constant before it.
    ``increments`` stores the Brownian increments of each Euler step.
    """

    t0: float
    times: np.ndarray
    paths: np.ndarray
    drift: DriftFn
    seed: int
    increments: np.ndarray
    picard_gap: float = 0.0
    picard_gaps: tuple = field(default_factory=tuple)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        if t <= self.t0:
            return 0
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} is not on the flow grid")
        return k

    def marginal(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.paths[:, k])

    def marginal_at(self, t: float) -> DiscreteMeasure:
        return self.marginal(self.index_of(t))

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        np.savez(stem.with_suffix(".npz"), times=self.times, paths=self.paths, increments=self.increments)
        meta = {"t0": self.t0, "times": self.times.tolist(), "drift": self.drift.name, "seed": self.seed,
                "n_paths": self.n_paths, "picard_gap": self.picard_gap}
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, stem: str | Path, drift: DriftFn) -> "MeasureFlow":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        with np.load(stem.with_suffix(".npz")) as d:
            return cls(meta["t0"], d["times"], d["paths"], drift, meta["seed"], d["increments"],
                       meta.get("picard_gap", 0.0))


@dataclass(frozen=True, eq=False)
class GirsanovWeight:
    """Per-path density weights at each grid time."""

    times: np.ndarray
    weights: np.ndarray

    def at(self, k: int) -> np.ndarray:
        return self.weights[:, k]


def time_grid(t0: float, T: float, dt: float = 1e-2) -> np.ndarray:
    """Uniform grid from ``t0`` to ``T`` with step close to ``dt``."""
    if T <= t0:
        raise DomainError("horizon must exceed the initial time")
    n = max(1, int(round((T - t0) / dt)))
    return np.linspace(t0, T, n + 1)


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream, block))))


def brownian_increments(seed: int, n_paths: int, dt: np.ndarray) -> np.ndarray:
    """Brownian increments, one independent stream per block of paths."""
    dt = np.asarray(dt, dtype=float)
    out = np.empty((n_paths, dt.size))
    sq = np.sqrt(dt)
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        stop = min(start + BLOCK, n_paths)
        out[start:stop] = _block_rng(seed, STREAM_INCREMENTS, b).standard_normal((stop - start, dt.size)) * sq
    return out


def initial_draws(mu0: DiscreteMeasure, n_paths: int, seed: int) -> np.ndarray:
    """I.i.d. draws from ``mu0`` using the block streams."""
    if len(mu0) == 1:
        return np.full(n_paths, mu0.points[0])
    out = np.empty(n_paths)
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        stop = min(start + BLOCK, n_paths)
        out[start:stop] = mu0.sample(stop - start, _block_rng(seed, STREAM_INITIAL, b))
    return out


def _as_grid(t0: float, times) -> np.ndarray:
    ts = np.asarray(times, dtype=float)
    if ts.ndim != 1 or ts.size < 2 or np.any(np.diff(ts) <= 0):
        raise DomainError("time grid must be strictly increasing with at least two points")
    if abs(ts[0] - t0) > 1e-12:
        raise DomainError("time grid must start at t0")
    return ts


def simulate_flow(drift: DriftFn, mu0: DiscreteMeasure, t0: float, times, n_paths: int,
                  seed: int, x_init: np.ndarray | None = None) -> MeasureFlow:
    """Euler-Maruyama flow of ``dX = B(t, X) dt + dW`` from i.i.d. ``mu0`` draws.

    Parameters
    ----------
    x_init : ndarray, optional
        Explicit initial positions overriding the draws from ``mu0``.
    """
    if n_paths < 2:
        raise ConfigurationError("need at least two paths")
    ts = _as_grid(t0, times)
    drift.check_bound(ts)
    dt = np.diff(ts)
    dW = brownian_increments(seed, n_paths, dt)
    paths = np.empty((n_paths, ts.size))
    paths[:, 0] = initial_draws(mu0, n_paths, seed) if x_init is None else x_init
    for k in range(dt.size):
        x = paths[:, k]
        paths[:, k + 1] = x + drift(ts[k], x) * dt[k] + dW[:, k]
    return MeasureFlow(float(t0), ts, paths, drift, int(seed), dW)


def simulate_mkv_flow(drift_mkv, mu0: DiscreteMeasure, times, n_paths: int, n_picard: int = 0,
                      seed: int = 0, bound: float | None = None, x_init: np.ndarray | None = None,
                      ) -> MeasureFlow:
    """McKean-Vlasov flow with drift ``b(t, x, law of X_t)``.

    With ``n_picard = 0`` the empirical law of the current particles is
    frozen inside each Euler step. Otherwise the law-to-law map is iterated
    ``n_picard`` times from the constant flow ``mu0``, with the same Brownian
    increments at every sweep, and the sup-in-time W1 gap between the last two
    iterates is recorded on the result.
    """
    if isinstance(drift_mkv, DriftFn):
        drift = drift_mkv
    else:
        drift = DriftFn(None, np.inf if bound is None else bound, "mckean-vlasov", mkv=drift_mkv)
    if drift.mkv is None:
        return simulate_flow(drift, mu0, float(np.asarray(times)[0]), times, n_paths, seed, x_init)
    ts = _as_grid(float(np.asarray(times)[0]), times)
    dt = np.diff(ts)
    dW = brownian_increments(seed, n_paths, dt)
    x0 = initial_draws(mu0, n_paths, seed) if x_init is None else x_init

    def sweep(laws: Sequence[DiscreteMeasure] | None) -> np.ndarray:
        p = np.empty((n_paths, ts.size))
        p[:, 0] = x0
        for k in range(dt.size):
            x = p[:, k]
            m = DiscreteMeasure(x) if laws is None else laws[k]
            b = drift.mkv(ts[k], x, m)
            if np.any(np.abs(b) > drift.bound * (1 + 1e-12) + 1e-15):
                raise ConfigurationError(f"drift {drift.name!r} exceeds its declared bound")
            p[:, k + 1] = x + b * dt[k] + dW[:, k]
        return p

    if n_picard <= 0:
        return MeasureFlow(ts[0], ts, sweep(None), drift, int(seed), dW)
    frozen = DiscreteMeasure(x0)
    current = sweep([frozen] * dt.size)
    gaps = []
    for _ in range(n_picard):
        laws = [DiscreteMeasure(current[:, k]) for k in range(dt.size)]
        nxt = sweep(laws)
        gaps.append(max(wasserstein1(DiscreteMeasure(nxt[:, k]), DiscreteMeasure(current[:, k]))
                        for k in range(ts.size)))
        current = nxt
    return MeasureFlow(ts[0], ts, current, drift, int(seed), dW, gaps[-1], tuple(gaps))


def girsanov_weights(flow: MeasureFlow, target_drift: DriftFn) -> GirsanovWeight:
    """Weights turning the flow's path law into the law under ``target_drift``."""
    ts = flow.times
    dt = flow.dt
    logw = np.zeros_like(flow.paths)
    for k in range(dt.size):
        x = flow.paths[:, k]
        m = flow.marginal(k) if (flow.drift.measure_dependent or target_drift.measure_dependent) else None
        d = target_drift(ts[k], x, m) - flow.drift(ts[k], x, m)
        logw[:, k + 1] = logw[:, k] + d * flow.increments[:, k] - 0.5 * d * d * dt[k]
    return GirsanovWeight(ts, np.exp(logw))


def gaussian_score(s: float, y, t: float, x, drift_const: float = 0.0):
    """Score ``d/dx log p(s, y, t, x)`` of the constant-drift unit-noise kernel."""
    if s <= t:
        raise DomainError("score needs s > t")
    h = s - t
    return (np.asarray(y, dtype=float) - np.asarray(x, dtype=float) - drift_const * h) / h


def silverman_bandwidth(samples: np.ndarray) -> float:
    s = np.std(samples, ddof=1)
    return float(1.06 * s * samples.size ** (-0.2))


def kde_score(flow: MeasureFlow, s: float, y: float, t: float, x: float, bandwidth: float | None = None,
              h: float = 1e-2, return_stderr: bool = False):
    """Kernel estimate of ``d/dx log p(s, y, t, x)`` for the flow's drift.

    Paths are re-simulated from ``x - h`` and ``x + h`` at time ``t`` with the
    flow's seed (common random numbers); the log of each Gaussian-kernel
    density estimate at ``y`` is differenced centrally. ``bandwidth``
    defaults to Silverman's rule. With ``return_stderr`` a delta-method
    standard error is returned as well.
    """
    if bandwidth is not None and bandwidth <= 0:
        raise DomainError("bandwidth must be positive")
    if s <= t:
        raise DomainError("score needs s > t")
    n_steps = max(1, int(round((s - t) / float(np.mean(flow.dt)))))
    grid = np.linspace(t, s, n_steps + 1)
    ends = []
    for xi in (x - h, x + h):
        f = simulate_flow(flow.drift, DiscreteMeasure.dirac(xi), t, grid, flow.n_paths, flow.seed)
        ends.append(f.paths[:, -1])
    bw = silverman_bandwidth(ends[0]) if bandwidth is None else bandwidth
    k = [np.exp(-0.5 * ((y - e) / bw) ** 2) for e in ends]
    dens = [np.mean(v) for v in k]
    est = float((np.log(dens[1]) - np.log(dens[0])) / (2 * h))
    if not return_stderr:
        return est
    infl = (k[1] / dens[1] - k[0] / dens[0]) / (2 * h)
    return est, float(np.std(infl, ddof=1) / np.sqrt(infl.size))
