"""Explicit solutions: zero generator, linear-in-z generator, quadratic generator.

Expectations over Gaussian increments use Gauss-Hermite nodes convolved
onto the atoms of the measure; Monte Carlo is used only where paths are
needed (linear generator with non-constant drift).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CapabilityError, DomainError, NonConvergenceError
from .flows import (DriftFn, MeasureFlow, brownian_increments, simulate_flow, simulate_mkv_flow,
                    time_grid)
from .functionals import TerminalFunctional
from .measures import DiscreteMeasure, GaussianSpec, GridDensity, relative_entropy

__all__ = [
    "WbsdeSolution",
    "TangentProcessState",
    "GibbsState",
    "gaussian_convolution",
    "solve_zero_generator",
    "solve_linear_generator",
    "solve_affine_generator",
    "linear_generator_z",
    "tangent_processes",
    "solve_quadratic",
    "quadratic_solution",
    "entropic_objective",
    "compress_measure",
    "child_seed",
]


@dataclass(frozen=True)
class WbsdeSolution:
    """Pair of maps ``Y(t, m)`` and ``Z(t, x, m)`` valid for flows started at ``t0``.

    ``Z`` must accept an array of ``x`` values and return an array of the
    same shape.
    """

    t0: float
    T: float
    Y: Callable[[float, DiscreteMeasure], float]
    Z: Callable[[float, np.ndarray, DiscreteMeasure], np.ndarray]
    provenance: str
    info: dict = field(default_factory=dict)

    def shifted(self, c: float) -> "WbsdeSolution":
        """Copy with ``Y`` shifted by ``c`` at every time before ``T``."""
        Y = self.Y
        T = self.T
        return WbsdeSolution(self.t0, T, lambda t, m: Y(t, m) + (c if t < T else 0.0), self.Z,
                             self.provenance, dict(self.info, shift=c))


def child_seed(seed: int, *key: int) -> int:
    """Deterministic derived seed for a named substream."""
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1)[0])


def gaussian_convolution(m: DiscreteMeasure, variance: float, n_nodes: int = 64) -> DiscreteMeasure:
    """Law of ``U + sqrt(variance) G`` by Gauss-Hermite nodes on every atom."""
    if variance <= 0:
        return m
    z, w = GaussianSpec(0.0, variance).quadrature(n_nodes)
    pts = (m.points[:, None] + z[None, :]).ravel()
    wts = (m.weights[:, None] * w[None, :]).ravel()
    return DiscreteMeasure.normalized(pts, wts)


def _mc_convolution(m: DiscreteMeasure, variance: float, n_mc: int, rng: np.random.Generator
                    ) -> tuple[DiscreteMeasure, np.ndarray]:
    draws = rng.standard_normal(n_mc) * np.sqrt(variance)
    u = m.sample(n_mc, rng)
    return DiscreteMeasure(u + draws), draws


def solve_zero_generator(psi: TerminalFunctional, T: float, n_mc: int = 10_000, seed: int = 0,
                         method: str = "quadrature", n_nodes: int = 64, t0: float = 0.0,
                         z_points: int = 401) -> WbsdeSolution:
    """Solution for ``f = 0``: heat flow of ``psi`` on the measure space.

    ``Y(t, m) = psi(law(U + W_{T-t}))`` and ``Z(t, x, m)`` is the
    score-weighted expectation of the flat derivative of ``psi`` at that law.

    Parameters
    ----------
    method : {"quadrature", "mc"}
        Gauss-Hermite nodes (deterministic) or ``n_mc`` Gaussian draws
        seeded by ``seed`` and the evaluation time.
    z_points : int
        With ``method="mc"``, ``Z`` requested at more points than this is
        evaluated on an even lattice over their range and interpolated
        linearly.
    """
    if method not in ("quadrature", "mc"):
        raise ValueError("method must be 'quadrature' or 'mc'")

    def _rng(t):
        return np.random.default_rng([int(seed), int(round(t * 1e9))])

    def law(t, m):
        if method == "quadrature":
            return gaussian_convolution(m, T - t, n_nodes)
        return _mc_convolution(m, T - t, n_mc, _rng(t))[0]

    def Y(t, m):
        if t >= T:
            return psi(m)
        return psi(law(t, m))

    def Z(t, x, m):
        xs = np.asarray(x, dtype=float)
        if t >= T:
            if psi.flat_deriv_grad is None:
                raise DomainError("Z at the horizon needs the spatial derivative of the flat derivative")
            return psi.flat_deriv_grad(m, xs)
        h = T - t
        if method == "quadrature":
            nu = gaussian_convolution(m, h, n_nodes)
            z, w = GaussianSpec(0.0, h).quadrature(n_nodes)
        else:
            nu, z = _mc_convolution(m, h, n_mc, _rng(t))
            w = np.full(z.size, 1.0 / z.size)
            if xs.size > z_points:
                lat = np.linspace(xs.min(), xs.max(), z_points)
                vals = psi.flat(nu, lat[:, None] + z[None, :]) @ (w * z / h)
                return np.interp(xs, lat, vals).reshape(xs.shape)
        d = psi.flat(nu, xs.reshape(-1, 1) + z[None, :])
        return (d @ (w * z / h)).reshape(xs.shape)

    return WbsdeSolution(t0, T, Y, Z, "zero", {"method": method, "n_nodes": n_nodes, "n_mc": n_mc})


# ----------------------------------------------------------- linear generator


@dataclass(frozen=True, eq=False)
class TangentProcessState:
    """Tangent processes along a main path and an independent copy.

    ``coupling`` holds ``(X, Xbar)``: main paths and copy paths, both
    ``n_paths x n_times``. ``J`` follows the main paths; ``Jbar`` the copies.
    ``score_weight`` is ``(1/(T-t)) sum J dW`` along the main paths.
    """

    times: np.ndarray
    J: np.ndarray
    Jbar: np.ndarray
    coupling: tuple[np.ndarray, np.ndarray]
    score_weight: np.ndarray


def _poly_features(x: np.ndarray, degree: int) -> np.ndarray:
    s = np.std(x)
    u = (x - np.mean(x)) / (s if s > 0 else 1.0)
    return np.vander(u, degree + 1, increasing=True)


def _conditional_mean(y: np.ndarray, x: np.ndarray, degree: int) -> np.ndarray:
    A = _poly_features(x, degree)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return A @ coef


def tangent_processes(flow: MeasureFlow, bbar: DriftFn, x: float | None = None, seed: int | None = None,
                      degree: int = 3) -> TangentProcessState:
    """Tangent processes of the flow map with respect to its initial point.

    Parameters
    ----------
    flow : MeasureFlow
        Paths of the (McKean-Vlasov) flow started from the law ``m``; its
        columns give the law ``nu_s`` and its rows serve as the independent
        copies ``Xbar``.
    bbar : DriftFn
        Drift with ``dx`` and, when measure-dependent, ``mean_field`` data.
    x : float, optional
        Start of the main paths. When omitted they start from i.i.d. draws of
        the flow's initial law.

    Notes
    -----
    ``J`` solves ``dJ = J B'(X) ds`` and is integrated exactly per step.
    ``Jbar`` solves the linear equation driven by ``J`` through the measure
    derivative of the drift; its conditional-mean term given the main path is
    estimated by polynomial regression on the current main-path value.
    """
    ts = flow.times
    dt = flow.dt
    n = flow.n_paths
    s2 = child_seed(flow.seed if seed is None else seed, 17)
    dW = brownian_increments(s2, n, dt)
    X = np.empty((n, ts.size))
    if x is None:
        X[:, 0] = flow.paths[np.random.default_rng(s2).permutation(n), 0]
    else:
        X[:, 0] = x
    Xb = flow.paths
    J = np.ones((n, ts.size))
    Jb = np.zeros((n, ts.size))
    mf = bbar.mean_field
    measure_dep = bbar.mkv is not None
    for k in range(dt.size):
        law = flow.marginal(k) if measure_dep else None
        xk = X[:, k]
        X[:, k + 1] = xk + bbar(ts[k], xk, law) * dt[k] + dW[:, k]
        J[:, k + 1] = J[:, k] * np.exp(bbar.derivative(ts[k], xk, law) * dt[k])
        if mf is None:
            continue
        dphi_dv, tests = mf
        a = np.asarray(dphi_dv(ts[k], Xb[:, k], law), dtype=float).reshape(n, -1)
        forcing = np.zeros(n)
        for q, (_, c1) in enumerate(tests):
            cond = _conditional_mean(Jb[:, k] * c1(Xb[:, k]), xk, degree)
            forcing += a[:, q] * (cond + J[:, k] * c1(xk))
        Jb[:, k + 1] = Jb[:, k] + (Jb[:, k] * bbar.derivative(ts[k], Xb[:, k], law) + forcing) * dt[k]
    h = ts[-1] - ts[0]
    weight = np.sum(J[:, :-1] * dW, axis=1) / h
    return TangentProcessState(ts, J, Jb, (X, Xb), weight)


def _drift_from(ell) -> DriftFn:
    if isinstance(ell, DriftFn):
        return ell
    from .functionals import LinearInZ

    if isinstance(ell, LinearInZ):
        raise CapabilityError("pass the drift as a DriftFn carrying its spatial derivative")
    raise TypeError("ell must be a DriftFn")


def _law_flow(drift: DriftFn, m: DiscreteMeasure, grid: np.ndarray, n_paths: int, seed: int) -> MeasureFlow:
    if drift.mkv is not None:
        return simulate_mkv_flow(drift, m, grid, n_paths, 0, seed)
    return simulate_flow(drift, m, grid[0], grid, n_paths, seed)


def linear_generator_z(drift: DriftFn, psi: TerminalFunctional, t: float, x: float, m: DiscreteMeasure,
                       T: float, n_paths: int = 10_000, dt: float = 1e-2, seed: int = 0,
                       assembly: str = "general") -> tuple[float, float]:
    """Z of the linear generator at one point, with its Monte Carlo stderr.

    ``assembly`` selects the estimator:

    - ``"general"``: score-weighted flat derivative plus the ``Jbar`` term;
    - ``"simplified"``: score-weighted term alone (measure-free drift only);
    - ``"pathwise"``: ``J``-weighted spatial derivative plus the ``Jbar`` term.
    """
    grid = time_grid(t, T, dt)
    flow = _law_flow(drift, m, grid, n_paths, seed)
    st = tangent_processes(flow, drift, x=float(x), seed=seed)
    X, Xb = st.coupling
    nu_T = DiscreteMeasure(Xb[:, -1])
    if drift.const is not None:
        score = (X[:, -1] - x - drift.const * (T - t)) / (T - t)
    else:
        score = st.score_weight
    parts = []
    if assembly in ("general", "simplified"):
        parts.append(psi.flat(nu_T, X[:, -1]) * score)
    elif assembly == "pathwise":
        if psi.flat_deriv_grad is None:
            raise CapabilityError("pathwise assembly needs the spatial derivative of the flat derivative of psi")
        parts.append(st.J[:, -1] * psi.flat_deriv_grad(nu_T, X[:, -1]))
    else:
        raise ValueError(f"unknown assembly {assembly!r}")
    if assembly != "simplified" and drift.mean_field is not None:
        parts.append(st.Jbar[:, -1] * psi.flat_deriv_grad(nu_T, Xb[:, -1]))
    sample = np.sum(parts, axis=0)
    return float(np.mean(sample)), float(np.std(sample, ddof=1) / np.sqrt(sample.size))


def solve_linear_generator(ell: DriftFn, psi: TerminalFunctional, T: float, n_paths: int = 10_000,
                           dt: float = 1e-2, seed: int = 0, t0: float = 0.0,
                           assembly: str = "general") -> WbsdeSolution:
    """Solution for ``f = ell(t, x, m) z`` by the Feynman-Kac formula on measures.

    ``Y(t, m) = psi(law of X_T)`` where ``X`` follows the McKean-Vlasov flow
    of drift ``ell`` started from ``m`` at ``t``. ``Z`` is assembled per
    :func:`linear_generator_z`. A zero drift reduces to
    :func:`solve_zero_generator` with quadrature.
    """
    drift = _drift_from(ell)
    if drift.mkv is not None and psi.flat_deriv_grad is None:
        raise CapabilityError("measure-dependent drift requires the spatial derivative of the flat "
                              "derivative of psi (flat_deriv_grad)")
    if drift.const == 0.0 and drift.mkv is None:
        sol = solve_zero_generator(psi, T, t0=t0)
        return WbsdeSolution(t0, T, sol.Y, sol.Z, "linear", {"reduced": "zero"})

    def Y(t, m):
        if t >= T:
            return psi(m)
        if drift.const is not None:
            return psi(gaussian_convolution(m.shift(drift.const * (T - t)), T - t))
        flow = _law_flow(drift, m, time_grid(t, T, dt), n_paths, seed)
        return psi(DiscreteMeasure(flow.paths[:, -1]))

    def Z(t, x, m):
        xs = np.asarray(x, dtype=float)
        if t >= T:
            return psi.flat_deriv_grad(m, xs)
        out = [linear_generator_z(drift, psi, t, xi, m, T, n_paths, dt, seed, assembly)[0]
               for xi in xs.ravel()]
        return np.asarray(out).reshape(xs.shape)

    return WbsdeSolution(t0, T, Y, Z, "linear", {"n_paths": n_paths, "dt": dt, "assembly": assembly})


def solve_affine_generator(psi: TerminalFunctional, T: float, decay: float = 0.0, source: float = 0.0,
                           drift: float = 0.0, n_nodes: int = 64, t0: float = 0.0) -> WbsdeSolution:
    """Closed-form solution for ``f = -decay * y + source + drift * z``.

    With ``h = T - t`` and ``nu`` the law of ``U + drift * h + W_h``::

        Y(t, m) = exp(-decay h) psi(nu) + source (1 - exp(-decay h)) / decay
        Z(t, x, m) = exp(-decay h) E[flat psi(nu)(x + drift h + W_h) W_h / h]
    """

    def _disc(h):
        return np.exp(-decay * h)

    def _acc(h):
        return source * h if decay == 0 else source * (1.0 - np.exp(-decay * h)) / decay

    def Y(t, m):
        if t >= T:
            return psi(m)
        h = T - t
        return float(_disc(h) * psi(gaussian_convolution(m.shift(drift * h), h, n_nodes)) + _acc(h))

    def Z(t, x, m):
        xs = np.asarray(x, dtype=float)
        if t >= T:
            return psi.flat_deriv_grad(m, xs)
        h = T - t
        nu = gaussian_convolution(m.shift(drift * h), h, n_nodes)
        z, w = GaussianSpec(0.0, h).quadrature(n_nodes)
        d = psi.flat(nu, xs.reshape(-1, 1) + drift * h + z[None, :])
        return _disc(h) * (d @ (w * z / h)).reshape(xs.shape)

    return WbsdeSolution(t0, T, Y, Z, "affine", {"decay": decay, "source": source, "drift": drift})


# --------------------------------------------------------- quadratic generator


@dataclass(frozen=True, eq=False)
class GibbsState:
    """Gibbs fixed point on a uniform grid and its convergence record."""

    z_grid: np.ndarray
    nu: GridDensity
    iterations: int
    sup_gap: float
    objective: tuple = ()
    steps: tuple = ()
    gaps: tuple = ()

    def to_json(self) -> str:
        return json.dumps({
            "grid": {"left": float(self.z_grid[0]), "step": float(self.nu.step), "n": int(self.z_grid.size)},
            "values": self.nu.values.tolist(), "gap": self.sup_gap, "iterations": self.iterations,
            "objective": list(self.objective), "steps": list(self.steps), "gaps": list(self.gaps),
        })


def compress_measure(m: DiscreteMeasure, max_atoms: int) -> DiscreteMeasure:
    """Replace ``m`` by ``max_atoms`` equally weighted quantile atoms when larger."""
    if len(m) <= max_atoms:
        return m
    order = np.argsort(m.points, kind="stable")
    cw = np.cumsum(m.weights[order])
    u = (np.arange(max_atoms) + 0.5) / max_atoms
    idx = np.minimum(np.searchsorted(cw, u, side="left"), len(m) - 1)
    return DiscreteMeasure(m.points[order][idx])


def _grid_convolution(values: np.ndarray, z: np.ndarray, h: float, m: DiscreteMeasure) -> DiscreteMeasure:
    pts = (z[:, None] + m.points[None, :]).ravel()
    wts = ((values * h)[:, None] * m.weights[None, :]).ravel()
    return DiscreteMeasure.normalized(pts, wts)


def entropic_objective(psi: TerminalFunctional, nu: GridDensity, m: DiscreteMeasure, gamma: GaussianSpec) -> float:
    """``psi(nu * m) - D(nu | gamma)`` on the grid of ``nu``."""
    return psi(_grid_convolution(nu.values, nu.grid, nu.step, m)) - relative_entropy(nu, gamma)


def solve_quadratic(psi: TerminalFunctional, t: float, m: DiscreteMeasure, T: float,
                    n_grid: int = 1024, half_width: float = 6.5, damping: float = 0.5, tol: float = 1e-8,
                    max_iter: int = 200, max_atoms: int = 512):
    """Gibbs fixed point for the generator ``z**2 / 2``.

    Maximizes ``psi(nu * m) - D(nu | N(0, T - t))`` over densities ``nu`` on a
    uniform grid of ``n_grid`` nodes spanning ``half_width`` standard
    deviations. Each sweep first tries the full Gibbs update; when the
    objective would decrease the step falls back to ``damping`` and is then
    halved until it does not.

    Returns
    -------
    value : float
    state : GibbsState
    Z : callable
        ``x -> int d_x flat psi(nu * m)(z + x) nu(dz)``.

    Raises
    ------
    NonConvergenceError
        If the sup-norm gap between ``nu`` and its Gibbs update stays above
        ``tol`` after ``max_iter`` sweeps.
    """
    if not psi.concave:
        warnings.warn(f"functional {psi.name!r} is not declared concave; the Gibbs iteration may fail",
                      stacklevel=2)
    if t >= T:
        z = np.zeros(1)
        nu = None
        value = psi(m)

        def Zfun(x):
            return psi.flat_deriv_grad(m, np.asarray(x, dtype=float))

        return value, GibbsState(z, nu, 0, 0.0), Zfun
    m = compress_measure(m, max_atoms)
    gamma = GaussianSpec(0.0, T - t)
    L = half_width * gamma.sd
    z = np.linspace(-L, L, n_grid)
    h = z[1] - z[0]
    g0 = gamma.pdf(z)
    g0 = g0 / (h * g0.sum())
    pts_zm = z[:, None] + m.points[None, :]

    def gibbs(values):
        conv = _grid_convolution(values, z, h, m)
        phi = psi.flat(conv, pts_zm) @ m.weights
        e = np.exp(phi - phi.max()) * g0
        return e / (h * e.sum())

    def objective(values):
        return psi(_grid_convolution(values, z, h, m)) - relative_entropy(GridDensity(z, values, h), gamma)

    nu = g0.copy()
    obj = objective(nu)
    objs, steps, gaps = [obj], [], []
    gap = np.inf
    for k in range(max_iter + 1):
        G = gibbs(nu)
        gap = float(np.max(np.abs(G - nu)))
        gaps.append(gap)
        if gap <= tol:
            break
        if k == max_iter:
            raise NonConvergenceError(f"Gibbs iteration stalled at gap {gap:.3e}", gap, k)
        step = 1.0
        while True:
            cand = (1.0 - step) * nu + step * G
            cand /= h * cand.sum()
            c_obj = objective(cand)
            if c_obj >= obj - 1e-13 or step < 1e-6:
                break
            step = damping if step == 1.0 else 0.5 * step
        nu, obj = cand, c_obj
        objs.append(obj)
        steps.append(step)
    dens = GridDensity(z, nu, h)
    state = GibbsState(z, dens, k, gap, tuple(objs), tuple(steps), tuple(gaps))
    conv = _grid_convolution(nu, z, h, m)
    value = float(objective(nu))

    def Zfun(x):
        xs = np.asarray(x, dtype=float)
        if psi.flat_deriv_grad is None:
            raise CapabilityError("Z needs the spatial derivative of the flat derivative of psi")
        d = psi.flat_deriv_grad(conv, xs.reshape(-1, 1) + z[None, :])
        return (d @ (nu * h)).reshape(xs.shape)

    return value, state, Zfun


def quadratic_solution(psi: TerminalFunctional, T: float, t0: float = 0.0, z_points: int = 401,
                       **kw) -> WbsdeSolution:
    """Wrap :func:`solve_quadratic` as a solution object.

    ``Z`` is evaluated on an ``x`` lattice spanning the requested points and
    linearly interpolated when more than ``z_points`` values are requested.
    """

    def Y(t, m):
        return solve_quadratic(psi, t, m, T, **kw)[0]

    def Z(t, x, m):
        xs = np.asarray(x, dtype=float)
        Zf = solve_quadratic(psi, t, m, T, **kw)[2]
        if xs.size <= z_points:
            return Zf(xs)
        lat = np.linspace(xs.min(), xs.max(), z_points)
        return np.interp(xs, lat, Zf(lat))

    return WbsdeSolution(t0, T, Y, Z, "quadratic", kw)
