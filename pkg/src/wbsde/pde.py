"""Residual of the second-order equation on measures for smooth cylinder maps,
the Ito expansion of ``u(t, mu_t)`` along flows, and the equivalence between
that equation and the backward identity with generator ``Lbar + z Bbar``.

For a cylinder ``u(t, m) = Phi(t, <g_1(t, .), m>, ..., <g_k(t, .), m>)`` the
spatial derivatives of the flat derivative are exact:
``d_x flat u = sum_i d_i Phi g_i'`` and ``d_xx flat u = sum_i d_i Phi g_i''``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .explicit import WbsdeSolution
from .flows import MeasureFlow
from .functionals import CylinderSpec
from .measures import DiscreteMeasure, GaussianSpec
from .verify import wbsde_residual

__all__ = [
    "PdeData",
    "TimeCylinder",
    "pde_residual",
    "ito_flow_check",
    "duality_equivalence_check",
    "classical_cylinder",
    "as_solution",
    "DualityReport",
]

FD_T = 1e-5


@dataclass(frozen=True)
class PdeData:
    """Drift ``Bbar(t, x, m)`` and running term ``Lbar(t, x, m, r, p)``."""

    Bbar: Callable
    Lbar: Callable
    B_bound: float = np.inf
    L_bound: float = np.inf

    def generator(self):
        """Generator ``f(t, x, m, y, z) = Lbar(t, x, m, y, z) + z Bbar(t, x, m)``."""
        B, L = self.Bbar, self.Lbar

        def f(t, x, m, y, z):
            x = np.asarray(x, dtype=float)
            return np.asarray(L(t, x, m, y, z), dtype=float) + np.asarray(z) * np.asarray(B(t, x, m))

        return f


@dataclass(frozen=True)
class TimeCylinder:
    """Time-dependent cylinder ``Phi(t, v)`` with inner ``g_i(t, x)``.

    ``inner`` holds triples ``(g, g_x, g_xx)`` of callables ``(t, x)``.
    ``time_deriv`` gives ``d_t u(t, m)`` when known; otherwise a central
    difference with step 1e-5 is used, one-sided within a step of
    ``horizon``.
    """

    outer: Callable
    outer_grad: Callable
    inner: Sequence[tuple[Callable, Callable, Callable]]
    time_deriv: Callable | None = None
    horizon: float | None = None

    @classmethod
    def static(cls, spec: CylinderSpec) -> "TimeCylinder":
        inner = [(lambda t, x, g=g: g(x), lambda t, x, g=g1: g(x), lambda t, x, g=g2: g(x))
                 for g, g1, g2 in spec.inner]
        return cls(lambda t, v: spec.outer(v), lambda t, v: spec.outer_grad(v), inner,
                   time_deriv=lambda t, m: 0.0)

    def integrals(self, t: float, m: DiscreteMeasure) -> np.ndarray:
        return np.array([np.dot(m.weights, g(t, m.points)) for g, _, _ in self.inner])

    def value(self, t: float, m: DiscreteMeasure) -> float:
        return float(self.outer(t, self.integrals(t, m)))

    def dx_flat(self, t: float, m: DiscreteMeasure, x) -> np.ndarray:
        d = np.asarray(self.outer_grad(t, self.integrals(t, m)), dtype=float)
        x = np.asarray(x, dtype=float)
        return sum(d[i] * np.asarray(g1(t, x), dtype=float) for i, (_, g1, _) in enumerate(self.inner))

    def dxx_flat(self, t: float, m: DiscreteMeasure, x) -> np.ndarray:
        d = np.asarray(self.outer_grad(t, self.integrals(t, m)), dtype=float)
        x = np.asarray(x, dtype=float)
        return sum(d[i] * np.asarray(g2(t, x), dtype=float) for i, (_, _, g2) in enumerate(self.inner))

    def dt(self, t: float, m: DiscreteMeasure) -> float:
        if self.time_deriv is not None:
            return float(self.time_deriv(t, m))
        if self.horizon is not None and t + FD_T > self.horizon:
            v0, v1, v2 = (self.value(t - j * FD_T, m) for j in range(3))
            return (3 * v0 - 4 * v1 + v2) / (2 * FD_T)
        return (self.value(t + FD_T, m) - self.value(t - FD_T, m)) / (2 * FD_T)

    def plus(self, other: "TimeCylinder") -> "TimeCylinder":
        """Sum of two cylinders (inner lists concatenated)."""
        k = len(self.inner)
        a, b = self, other
        td = None
        if a.time_deriv is not None and b.time_deriv is not None:
            td = lambda t, m: a.time_deriv(t, m) + b.time_deriv(t, m)
        return TimeCylinder(
            lambda t, v: a.outer(t, v[:k]) + b.outer(t, v[k:]),
            lambda t, v: np.concatenate([np.atleast_1d(a.outer_grad(t, v[:k])),
                                         np.atleast_1d(b.outer_grad(t, v[k:]))]),
            list(a.inner) + list(b.inner), td, a.horizon if a.horizon is not None else b.horizon)


def as_solution(u: TimeCylinder, t0: float, T: float) -> WbsdeSolution:
    """``(Y, Z) = (u, d_x flat u)``."""
    return WbsdeSolution(t0, T, lambda t, m: u.value(t, m),
                         lambda t, x, m: u.dx_flat(t, m, x), "cylinder")


def pde_residual(u: TimeCylinder, data: PdeData, t: float, m: DiscreteMeasure) -> float:
    """``d_t u + <d_x flat u Bbar + d_xx flat u / 2 + Lbar(., u, d_x flat u), m>``.

    Measure integrals are exact sums over the atoms of ``m``.
    """
    x = m.points
    p = u.dx_flat(t, m, x)
    q = u.dxx_flat(t, m, x)
    r = u.value(t, m)
    B = np.asarray(data.Bbar(t, x, m), dtype=float) * np.ones_like(x)
    L = np.asarray(data.Lbar(t, x, m, r, p), dtype=float) * np.ones_like(x)
    return float(u.dt(t, m) + np.dot(m.weights, p * B + 0.5 * q + L))


def ito_flow_check(u: TimeCylinder, flow: MeasureFlow, diffusion_coef: float = 0.5,
                   return_path: bool = False, martingale: bool = True):
    """Largest gap between ``u(t_k, mu_k) - u(t_0, mu_0)`` and its Ito prediction.

    The prediction sums ``dt * [d_t u + <d_x flat u B + c d_xx flat u, mu_j>]``
    over grid steps ``j < k`` (left point), with ``c = diffusion_coef``
    (``1/2`` is the correct value). With ``martingale`` the empirical
    martingale increments ``mean(d_x flat u dW + d_xx flat u (dW^2 - dt) / 2)``
    are added to the prediction, which strips the sampling noise and leaves
    the Euler bias.
    """
    ts = flow.times
    K = ts.size
    vals = np.empty(K)
    pred = np.zeros(K)
    for k in range(K):
        m = flow.marginal(k)
        vals[k] = u.value(ts[k], m)
        if k < K - 1:
            x = m.points
            mm = m if flow.drift.measure_dependent else None
            B = np.asarray(flow.drift(ts[k], x, mm), dtype=float) * np.ones_like(x)
            rate = u.dt(ts[k], m) + np.dot(m.weights, u.dx_flat(ts[k], m, x) * B
                                           + diffusion_coef * u.dxx_flat(ts[k], m, x))
            step = rate * (ts[k + 1] - ts[k])
            if martingale:
                xk, dw = flow.paths[:, k], flow.increments[:, k]
                step += float(np.mean(u.dx_flat(ts[k], m, xk) * dw
                                      + 0.5 * u.dxx_flat(ts[k], m, xk) * (dw * dw - (ts[k + 1] - ts[k]))))
            pred[k + 1] = pred[k] + step
    dev = (vals - vals[0]) - pred
    worst = float(np.max(np.abs(dev)))
    return (worst, dev) if return_path else worst


def classical_cylinder(G: tuple[Callable, Callable, Callable], ell: tuple[Callable, Callable, Callable] | None,
                       drift: float, T: float, n_nodes: int = 64, n_time: int = 48,
                       lattice_half_width: float = 10.0, lattice_points: int = 1001) -> TimeCylinder:
    """``u(t, m) = <g(t, .), m>`` with ``g`` solving the 1-D linear equation

        g_t + drift g' + g''/2 + ell = 0,  g(T) = G,

    by the Feynman-Kac formula: Gauss-Hermite in space and Gauss-Legendre
    over the source's time integral. ``G`` and ``ell`` are triples of the
    function and its first two derivatives; ``ell`` depends on ``x`` only.
    Evaluations on more than 64 points go through cubic splines of exact
    lattice values, cached per time.
    """
    z, w = GaussianSpec(0.0, 1.0).quadrature(n_nodes)
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_time)

    def heat(fn, t, x, h):
        xs = np.asarray(x, dtype=float)
        if h <= 0:
            return fn(xs)
        pts = xs[..., None] + drift * h + np.sqrt(h) * z
        return fn(pts) @ w

    def part(idx):
        def g(t, x):
            h = T - t
            out = heat(G[idx], t, x, h)
            if ell is not None and h > 0:
                s = 0.5 * h * (gl_x + 1.0)  # elapsed time in (0, h)
                acc = 0.0
                for si, wi in zip(s, gl_w):
                    acc = acc + wi * heat(ell[idx], t, x, si)
                out = out + 0.5 * h * acc
            return out
        return g

    # exact values on a fine lattice per time, cubic splines in between
    lattice = np.linspace(-lattice_half_width, lattice_half_width, lattice_points)
    cache: dict = {}

    def tabulated(idx):
        exact = part(idx)

        def g(t, x):
            xs = np.asarray(x, dtype=float)
            if xs.size <= 64:
                return exact(t, xs)
            key = (idx, float(t))
            if key not in cache:
                if len(cache) > 4096:
                    cache.clear()
                cache[key] = CubicSpline(lattice, exact(t, lattice))
            out = np.asarray(cache[key](xs), dtype=float)
            outside = np.abs(xs) > lattice_half_width
            if np.any(outside):
                out[outside] = exact(t, xs[outside])
            return out
        return g

    inner = [(tabulated(0), tabulated(1), tabulated(2))]

    return TimeCylinder(lambda t, v: v[0], lambda t, v: np.ones(1), inner, horizon=T)


@dataclass
class DualityReport:
    pde_residual: float
    pde_tol: float
    pde_pass: bool
    wbsde: list
    wbsde_pass: bool
    agree: bool
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def duality_equivalence_check(u: TimeCylinder, data: PdeData, flows: Sequence[MeasureFlow],
                              tol: float | None = None, pde_tol: float = 1e-6,
                              check_times: Sequence[float] | None = None) -> DualityReport:
    """Evaluate both verdicts on the same cylinder.

    The equation residual is taken at the check times on every flow
    marginal; the backward identity of ``(u, d_x flat u)`` with generator
    ``Lbar + z Bbar`` uses :func:`wbsde_residual`. The report agrees when both
    pass or both fail.
    """
    f = data.generator()
    worst = 0.0
    reports = []
    for flow in flows:
        sol = as_solution(u, flow.t0, flow.T)
        psi_T = _terminal_of(u, flow.T)
        rep = wbsde_residual(sol, f, psi_T, flow, check_times, tol)
        reports.append(json.loads(rep.to_json()))
        idx = sorted({flow.index_of(t) for t in check_times}) if check_times is not None else \
            list(np.unique(np.linspace(0, flow.times.size - 1, 5).round().astype(int)))
        for k in idx:
            worst = max(worst, abs(pde_residual(u, data, float(flow.times[k]), flow.marginal(int(k)))))
    pde_pass = worst <= pde_tol
    w_pass = all(r["passed"] for r in reports)
    return DualityReport(worst, pde_tol, bool(pde_pass), reports, bool(w_pass), bool(pde_pass == w_pass))


def _terminal_of(u: TimeCylinder, T: float):
    from .functionals import TerminalFunctional

    return TerminalFunctional(eval=lambda m: u.value(T, m),
                              flat_deriv=lambda m, x: _flat_at(u, T, m, x), name="u(T)")


def _flat_at(u: TimeCylinder, t: float, m: DiscreteMeasure, x) -> np.ndarray:
    d = np.asarray(u.outer_grad(t, u.integrals(t, m)), dtype=float)
    x = np.asarray(x, dtype=float)
    out = 0.0
    for i, (g, _, _) in enumerate(u.inner):
        out = out + d[i] * (np.asarray(g(t, x), dtype=float) - np.dot(m.weights, g(t, m.points)))
    return out
