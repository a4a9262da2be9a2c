"""Fixed-point construction of ``Y`` for generators ``h(t, m, y) + P(t, x) z``.

``Y`` is represented on a finite set of training measures by a model linear
in measure features (raw moments 1 to 4 and integrals of test functions),
with one coefficient vector per time knot. Each Picard sweep evaluates

    Gamma_y(t, m) = psi(law X_T) + int_t^T h(r, law X_r, y(r, law X_r)) dr,

with ``X`` started from ``m`` at ``t`` and driven by ``dX = P dt + dW``, then
refits the coefficients. Convergence is measured in the exponentially
weighted norm ``int e^{alpha t} sup_m |dy(t, m)| dt`` (trapezoid over the
knots, sup over the training measures).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, GluingError, NonConvergenceError
from .explicit import WbsdeSolution, gaussian_convolution
from .flows import DriftFn, brownian_increments, initial_draws, time_grid
from .functionals import SeparableYZ, TerminalFunctional
from .measures import DiscreteMeasure, GaussianSpec

__all__ = [
    "MeasureFeatureMap",
    "PicardSim",
    "PicardSolution",
    "SmallnessBounds",
    "default_training_measures",
    "smallness_check",
    "picard_solve_y",
    "picard_solve_piecewise",
    "concatenate_in_time",
    "z_from_y",
    "kbar_operator",
]

FD_EPS = 1e-3


# ------------------------------------------------------------ feature map


@dataclass(frozen=True, eq=False)
class MeasureFeatureMap:
    """``y(t, m) = <features(m), coef(t)>`` with ``coef`` linear between knots.

    The features are linear in ``m``: ``<x^p, m>`` for ``p = 0..4`` and
    ``<g_i, m>``. When ``terminal`` is set it replaces the model at the last
    knot.
    """

    test_functions: tuple
    time_knots: np.ndarray
    coefficients: np.ndarray
    terminal: TerminalFunctional | None = None

    @property
    def n_features(self) -> int:
        return 5 + len(self.test_functions)

    def point_features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = [x**p for p in range(5)] + [np.asarray(g(x), dtype=float) * np.ones_like(x)
                                           for g in self.test_functions]
        return np.stack(cols, axis=-1)

    def features(self, m: DiscreteMeasure) -> np.ndarray:
        return m.weights @ self.point_features(m.points)

    def _bracket(self, t: float) -> tuple[int, int, float]:
        ts = self.time_knots
        if t <= ts[0]:
            return 0, 0, 0.0
        if t >= ts[-1]:
            return ts.size - 1, ts.size - 1, 0.0
        j = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[j]) / (ts[j + 1] - ts[j])
        return j, j + 1, float(lam)

    def _knot_value(self, j: int, F: np.ndarray, m: DiscreteMeasure | None) -> float:
        if j == self.time_knots.size - 1 and self.terminal is not None and m is not None:
            return self.terminal(m)
        return float(F @ self.coefficients[j])

    def __call__(self, t: float, m: DiscreteMeasure) -> float:
        F = self.features(m)
        a, b, lam = self._bracket(t)
        va = self._knot_value(a, F, m)
        return va if lam == 0.0 else (1 - lam) * va + lam * self._knot_value(b, F, m)

    def _model_flat(self, j: int, m: DiscreteMeasure, e: np.ndarray, eps: float) -> np.ndarray:
        c = self.coefficients[j]
        base = self.features(m) @ c

        def raw(vals):
            return ((1 - eps) * base + eps * vals - base) / eps

        centre = float(np.dot(m.weights, raw(self.point_features(m.points) @ c)))
        return raw(self.point_features(e) @ c) - centre

    def flat(self, t: float, m: DiscreteMeasure, e, eps: float = FD_EPS) -> np.ndarray:
        """Finite-difference flat derivative in the direction of ``delta_e``.

        The model is affine in ``m``, so mixture values are assembled from
        features without building the mixed measure.
        """
        e = np.asarray(e, dtype=float)
        a, b, lam = self._bracket(t)
        last = self.time_knots.size - 1

        def knot(j):
            if j == last and self.terminal is not None:
                return np.asarray(self.terminal.flat(m, e), dtype=float)
            return self._model_flat(j, m, e, eps)

        va = knot(a)
        return va if lam == 0.0 else (1 - lam) * va + lam * knot(b)

    def as_terminal(self, t: float, bound: float = np.inf) -> TerminalFunctional:
        """Freeze time at ``t`` to use the map as a terminal functional."""
        return TerminalFunctional(eval=lambda m: self(t, m), flat_deriv=lambda m, x: self.flat(t, m, x),
                                  bound=bound, name=f"picard-Y({t:g})")


def default_training_measures(n_nodes: int = 16) -> list[DiscreteMeasure]:
    """Twelve Gaussians and eight two-component mixtures.

    Means range over ``[-2, 2]`` and standard deviations over ``[0.3, 2]``;
    each Gaussian is discretised by Gauss-Hermite nodes.
    """
    comps = [GaussianSpec(mu, sd**2) for mu in np.linspace(-2.0, 2.0, 4) for sd in (0.3, 1.0, 2.0)]

    def disc(g: GaussianSpec) -> DiscreteMeasure:
        z, w = g.quadrature(n_nodes)
        return DiscreteMeasure.normalized(z, w)

    out = [disc(g) for g in comps]
    pairs = [(0, 9, 0.5), (1, 10, 0.3), (2, 11, 0.5), (3, 6, 0.7),
             (4, 7, 0.5), (5, 8, 0.3), (0, 11, 0.5), (2, 9, 0.6)]
    for i, j, w in pairs:
        a, b = out[i], out[j]
        out.append(DiscreteMeasure.normalized(np.concatenate([a.points, b.points]),
                                              np.concatenate([w * a.weights, (1 - w) * b.weights])))
    return out


# ------------------------------------------------------------ smallness


@dataclass(frozen=True)
class SmallnessBounds:
    """Declared bounds entering the short-horizon conditions.

    ``C`` bounds the growth and y-Lipschitz modulus of ``h``; ``dy_sup`` is
    ``sup |d_y h|``; ``lip_dy`` the Lipschitz modulus of ``d_y h``;
    ``flat_sup`` and ``lip_flat`` bound the flat derivative of ``h`` in
    ``m`` and its Lipschitz modulus; ``lip`` is the Lipschitz modulus of
    ``h`` (defaults to ``C``).
    """

    psi_sup: float
    psi_flat_sup: float
    C: float
    dy_sup: float
    lip_dy: float = 0.0
    flat_sup: float = 0.0
    lip_flat: float = 0.0
    lip: float | None = None


def smallness_check(b: SmallnessBounds, horizon: float) -> dict:
    """Evaluate both short-horizon conditions on ``[t, t + horizon]``."""
    T = horizon
    lip = b.C if b.lip is None else b.lip
    first = T * (b.C + b.dy_sup)
    if T * b.C < 1 and T * b.dy_sup < 1:
        L_T = (b.psi_sup + T * b.C) / (1 - T * b.C) + (b.psi_flat_sup + T * b.flat_sup) / (1 - T * b.dy_sup)
    else:
        L_T = np.inf
    second = T * b.lip_flat + T * (L_T * b.lip_dy if b.lip_dy > 0 else 0.0) + T * b.dy_sup + T * lip
    return {"first": float(first), "second": float(second), "L_T": float(L_T),
            "ok": bool(first < 1 and second < 1)}


# ------------------------------------------------------------ solver


@dataclass(frozen=True)
class PicardSim:
    """Discretisation knobs.

    ``n_knots`` time knots carry coefficients; each knot interval is split
    into ``sub_steps`` integration steps. Brownian laws use ``n_nodes``
    Gauss-Hermite nodes when the inner drift is constant, otherwise
    ``n_paths`` Euler paths seeded by ``seed``.
    """

    n_knots: int = 21
    sub_steps: int = 4
    n_nodes: int = 16
    n_paths: int = 2000
    seed: int = 0
    z_steps: int = 40
    z_points: int = 81


@dataclass(eq=False)
class PicardSolution:
    y: MeasureFeatureMap
    t0: float
    T: float
    alpha: float
    gaps: list
    rhos: list
    log: list
    contraction_bound: float
    smallness: dict
    training: list
    diagnostics: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.gaps)

    @property
    def rho(self) -> float:
        tail = [r for r in self.rhos[1:] if np.isfinite(r)]
        return float(max(tail)) if tail else 0.0

    def __call__(self, t: float, m: DiscreteMeasure) -> float:
        return self.y(t, m)

    def write_log(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(r) + "\n" for r in self.log))


def _inner_const(P) -> float | None:
    if isinstance(P, DriftFn):
        return P.const
    if isinstance(P, (int, float)):
        return float(P)
    return None


def _as_drift(P) -> DriftFn:
    if isinstance(P, DriftFn):
        return P
    if isinstance(P, (int, float)):
        c = float(P)
        return DriftFn(lambda t, x: np.full_like(np.asarray(x, dtype=float), c), abs(c), "const", const=c)
    return DriftFn(P, np.inf, "P")


def _laws_from(m: DiscreteMeasure, t: float, grid: np.ndarray, P, sim: PicardSim, key: int
               ) -> list[DiscreteMeasure]:
    """Laws of ``X_r`` for ``r`` in ``grid`` (starting at ``t``) with ``X_t ~ m``."""
    c = _inner_const(P)
    if c is not None:
        return [gaussian_convolution(m.shift(c * (r - t)), r - t, sim.n_nodes) for r in grid]
    drift = _as_drift(P)
    dt = np.diff(grid)
    seed = int(np.random.SeedSequence([sim.seed, key]).generate_state(1)[0])
    dW = brownian_increments(seed, sim.n_paths, dt)
    x = initial_draws(m, sim.n_paths, seed)
    out = [DiscreteMeasure(x)]
    for k in range(dt.size):
        x = x + drift(grid[k], x) * dt[k] + dW[:, k]
        out.append(DiscreteMeasure(x))
    return out


def _unpack_h(h):
    if isinstance(h, SeparableYZ):
        return h.h, h.P, h.lip_y, h.h_bound
    return h, None, None, None


def picard_solve_y(h, P, psi: TerminalFunctional, training_measures: Sequence[DiscreteMeasure] | None = None,
                   alpha: float | None = None, tol: float = 1e-8, max_iter: int = 60,
                   sim: PicardSim | None = None, t0: float = 0.0, T: float = 1.0,
                   test_functions: Sequence[Callable] = (), lip_y: float | None = None,
                   h_bound: float | None = None, bounds: SmallnessBounds | None = None,
                   single_shot: bool = True) -> PicardSolution:
    """Picard iteration for ``Y`` on ``[t0, T]``.

    Parameters
    ----------
    h : callable or SeparableYZ
        ``h(t, m, y)``; a :class:`SeparableYZ` also supplies ``P`` and the
        declared bounds.
    P : DriftFn, float or callable
        Inner drift ``P(t, x)``; ``None`` takes it from ``h``.
    alpha : float, optional
        Exponential weight; defaults to twice the y-Lipschitz modulus.
    bounds : SmallnessBounds, optional
        Declared bounds for the short-horizon check. Derived from ``psi`` and
        the Lipschitz modulus when omitted.
    single_shot : bool
        When true the short-horizon conditions must hold on ``[t0, T]``;
        otherwise use :func:`picard_solve_piecewise`.

    Raises
    ------
    ConfigurationError
        If ``alpha`` does not exceed the Lipschitz modulus, or the
        short-horizon conditions fail in single-shot mode.
    NonConvergenceError
        If the gaps stop decreasing after the second sweep or ``max_iter`` is
        reached; carries the gap sequence.
    """
    hfun, hP, hlip, hbd = _unpack_h(h)
    P = hP if P is None else P
    if P is None:
        P = 0.0
    lip = hlip if lip_y is None else lip_y
    if lip is None:
        raise ConfigurationError("declare the y-Lipschitz modulus of h (lip_y)")
    h_bound = hbd if h_bound is None else h_bound
    alpha = 2.0 * max(lip, 1e-12) if alpha is None else float(alpha)
    if not alpha > lip:
        raise ConfigurationError(f"alpha={alpha} must exceed the Lipschitz modulus {lip}")
    sim = sim or PicardSim()
    if bounds is None:
        bounds = SmallnessBounds(psi.bound, psi.deriv_bound, lip, lip)
    small = smallness_check(bounds, T - t0)
    if single_shot and not small["ok"]:
        raise ConfigurationError(
            f"short-horizon conditions fail on [{t0}, {T}] ({small}); use picard_solve_piecewise")
    train = list(training_measures) if training_measures is not None else default_training_measures()
    knots = np.linspace(t0, T, sim.n_knots)
    fine = np.linspace(t0, T, (sim.n_knots - 1) * sim.sub_steps + 1)
    S = sim.sub_steps
    J = knots.size
    fmap = MeasureFeatureMap(tuple(test_functions), knots, np.zeros((J, 5 + len(test_functions))), psi)
    p = fmap.n_features

    # laws along the inner flow, fixed across sweeps
    Ftrain = np.array([fmap.features(m) for m in train])
    laws, feats, psiT, psi_last = [], [], np.empty((len(train), J)), {}
    for i, m in enumerate(train):
        laws.append([])
        feats.append([])
        for j in range(J):
            grid = fine[j * S:]
            L = _laws_from(m, knots[j], grid, P, sim, key=i * 10_000 + j) if grid.size > 1 else [m]
            laws[i].append(L)
            feats[i].append(np.array([fmap.features(q) for q in L]))
            psiT[i, j] = psi(L[-1])
            for l in range(max(0, (J - 2) * S - j * S), len(L)):
                psi_last[(i, j, l)] = psi(L[l])
    # knot bracket for every fine index
    kn_a = np.minimum(np.arange(fine.size) // S, J - 1)
    kn_lam = (np.arange(fine.size) - kn_a * S) / S

    coef = np.zeros((J, p))
    fitted_old = np.zeros((len(train), J))
    gaps, rhos, log = [], [], []
    weights_t = np.exp(alpha * (knots - t0))
    dt_fine = np.diff(fine)

    def y_on_law(i, j, l):
        g = j * S + l
        a, lam = kn_a[g], kn_lam[g]
        F = feats[i][j][l]
        va = psi_last[(i, j, l)] if a == J - 1 else F @ coef[a]
        if lam == 0.0:
            return va
        b = a + 1
        vb = psi_last[(i, j, l)] if b == J - 1 else F @ coef[b]
        return (1 - lam) * va + lam * vb

    for it in range(1, max_iter + 1):
        t_start = time.perf_counter()
        gamma = np.empty((len(train), J))
        for i in range(len(train)):
            for j in range(J):
                L = laws[i][j]
                if len(L) == 1:
                    gamma[i, j] = psiT[i, j]
                    continue
                vals = np.array([hfun(fine[j * S + l], L[l], y_on_law(i, j, l)) for l in range(len(L))],
                                dtype=float)
                seg = dt_fine[j * S:]
                gamma[i, j] = psiT[i, j] + float(np.sum(0.5 * (vals[:-1] + vals[1:]) * seg))
        new = np.linalg.lstsq(Ftrain, gamma, rcond=None)[0].T
        fitted = Ftrain @ new.T
        diff = np.max(np.abs(fitted - fitted_old), axis=0) * weights_t
        gap = float(np.sum(0.5 * (diff[:-1] + diff[1:]) * np.diff(knots))) if J > 1 else float(diff[0])
        rho = gap / gaps[-1] if gaps and gaps[-1] > 0 else float("nan")
        gaps.append(gap)
        rhos.append(rho)
        coef = new
        fitted_old = fitted
        log.append({"iter": it, "gap": gap, "rho": None if not np.isfinite(rho) else rho,
                    "wall_ms": round(1e3 * (time.perf_counter() - t_start), 3)})
        if gap <= tol:
            break
        if it >= 3 and gap > gaps[-2] * (1 + 1e-9):
            raise NonConvergenceError(
                f"Picard gaps not geometric (misconfiguration?): {gaps}", gap=gap, iterations=it)
    else:
        raise NonConvergenceError(f"no convergence in {max_iter} sweeps: gaps {gaps}",
                                  gap=gaps[-1], iterations=max_iter)

    fmap = MeasureFeatureMap(tuple(test_functions), knots, coef, psi)
    diag = []
    if h_bound is not None and np.isfinite(h_bound) and np.isfinite(psi.bound):
        cap = psi.bound + (T - t0) * h_bound
        worst = float(np.max(np.abs(fitted)))
        if worst > cap * (1 + 1e-6) + 1e-9:
            diag.append(f"a priori bound violated: max|Y|={worst:.6g} > {cap:.6g}")
    return PicardSolution(fmap, t0, T, alpha, gaps, rhos, log, lip / alpha, small, train, diag)


def picard_solve_piecewise(h, P, psi: TerminalFunctional, n_pieces: int | None = None, t0: float = 0.0,
                           T: float = 1.0, bounds: SmallnessBounds | None = None, **kw) -> list[PicardSolution]:
    """Solve backward on ``n_pieces`` equal subintervals, each with the next
    piece's ``Y`` at its left end as terminal functional.

    ``n_pieces`` defaults to the smallest count for which the short-horizon
    conditions hold. Pieces are returned in time order.
    """
    _, _, hlip, hbd = _unpack_h(h)
    lip = kw.get("lip_y", hlip)
    if bounds is None:
        bounds = SmallnessBounds(psi.bound, psi.deriv_bound, lip, lip)
    if n_pieces is None:
        n_pieces = 1
        while not smallness_check(bounds, (T - t0) / n_pieces)["ok"]:
            n_pieces += 1
            if n_pieces > 1000:
                raise ConfigurationError("short-horizon conditions cannot be met with declared bounds")
    edges = np.linspace(t0, T, n_pieces + 1)
    h_bound = kw.get("h_bound", hbd)
    pieces: list[PicardSolution] = []
    term = psi
    for i in range(n_pieces - 1, -1, -1):
        b_i = SmallnessBounds(term.bound, term.deriv_bound, bounds.C, bounds.dy_sup, bounds.lip_dy,
                              bounds.flat_sup, bounds.lip_flat, bounds.lip)
        sol = picard_solve_y(h, P, term, t0=float(edges[i]), T=float(edges[i + 1]), bounds=b_i,
                             single_shot=True, **kw)
        pieces.insert(0, sol)
        cap = term.bound + (edges[i + 1] - edges[i]) * (h_bound if h_bound is not None else np.inf)
        term = sol.y.as_terminal(float(edges[i]), bound=cap)
    return pieces


def concatenate_in_time(pieces: Sequence, test_measures: Sequence[DiscreteMeasure] | None = None,
                        tol: float = 1e-8) -> WbsdeSolution:
    """Glue solutions on consecutive subintervals into one ``Y`` map.

    Each piece is a :class:`PicardSolution` or a :class:`WbsdeSolution`.
    At every interior knot the left piece evaluated at its horizon must match
    the right piece at its start on ``test_measures`` within ``tol``.
    """
    if not pieces:
        raise GluingError("no pieces to glue")
    pieces = list(pieces)
    spans = [(float(p.t0), float(p.T)) for p in pieces]
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if abs(a1 - b0) > 1e-12:
            raise GluingError(f"pieces do not abut: {a1} vs {b0}")
    tests = list(test_measures) if test_measures is not None else default_training_measures(8)[::4]
    Yf = [p.y if isinstance(p, PicardSolution) else p.Y for p in pieces]
    jumps = []
    for i in range(len(pieces) - 1):
        t = spans[i][1]
        jump = max(abs(Yf[i](t, m) - Yf[i + 1](t, m)) for m in tests)
        jumps.append(jump)
        if jump > tol:
            raise GluingError(f"knot mismatch {jump:.3g} at t={t} exceeds {tol}")
    starts = np.array([s[0] for s in spans])

    def which(t):
        return int(min(max(np.searchsorted(starts, t, side="right") - 1, 0), len(pieces) - 1))

    def Y(t, m):
        return Yf[which(t)](t, m)

    def Z(t, x, m):
        p = pieces[which(t)]
        if isinstance(p, PicardSolution):
            raise ConfigurationError("assemble Z with z_from_y before gluing")
        return p.Z(t, x, m)

    return WbsdeSolution(float(spans[0][0]), float(spans[-1][1]), Y, Z, "glued",
                         {"pieces": len(pieces), "jumps": jumps})


# ------------------------------------------------------------ Z from Y


def _ydot(hfun, t, m, y, d=1e-6) -> float:
    return (hfun(t, m, y + d) - hfun(t, m, y - d)) / (2 * d)


def z_from_y(ysol, h, P, psi: TerminalFunctional, sim: PicardSim | None = None,
             h_flat: Callable | None = None, h_measure_free: bool = False) -> WbsdeSolution:
    """Assemble ``Z`` from a converged ``Y`` map by score-weighted expectations.

    With ``hhat(r, m) = h(r, m, Y(r, m))``::

        Z(t, x, m) = E[int_t^T flat hhat(r, L_r)(X_r) S_r dr + flat psi(L_T)(X_T) S_T]

    where ``X`` starts from ``x``, ``L_r`` is the law started from ``m`` and
    ``S_r`` the score weight. A constant inner drift uses Gauss-Hermite nodes
    and the exact Gaussian score; otherwise Euler paths carry the
    Bismut-Elworthy-Li weight ``(r - t)^{-1} int J dW`` with ``J`` the
    tangent process, which needs ``P`` as a :class:`DriftFn` with ``dx``.

    The flat derivative of ``hhat`` combines ``d_y h`` times the flat
    derivative of ``Y`` (finite differences, step 1e-3) with ``h_flat`` when
    given. Otherwise ``h`` is either declared free of ``m`` or differenced
    in ``m`` on a lattice of 21 points.
    """
    hfun, hP, _, _ = _unpack_h(h)
    if h_flat is None and isinstance(h, SeparableYZ):
        h_flat = h.h_flat
    P = hP if P is None else P
    if P is None:
        P = 0.0
    sim = sim or PicardSim()
    yfun = ysol.y if isinstance(ysol, PicardSolution) else ysol
    T = float(ysol.T)
    c = _inner_const(P)
    if c is None:
        drift = _as_drift(P)
        if drift.dx is None:
            raise ConfigurationError("non-constant inner drift needs its spatial derivative (DriftFn.dx)")

    def flat_hhat(r, L, e):
        y = yfun(r, L)
        out = _ydot(hfun, r, L, y) * np.asarray(yfun.flat(r, L, e), dtype=float)
        if h_flat is not None:
            return out + np.asarray(h_flat(r, L, y, e), dtype=float)
        if h_measure_free:
            return out
        lat = np.linspace(np.min(e), np.max(e), 21)
        from .measures import flat_derivative_fd
        d = flat_derivative_fd(lambda q: hfun(r, q, y), L, lat, FD_EPS)
        return out + np.interp(e, lat, d)

    def z_const(t, xs, m):
        h_ = T - t
        z, w = GaussianSpec(0.0, 1.0).quadrature(sim.n_nodes)
        out = np.zeros_like(xs)
        # midpoint rule in r avoids the endpoint r = t
        edges = np.linspace(t, T, sim.z_steps + 1)
        for r in 0.5 * (edges[:-1] + edges[1:]):
            s = r - t
            L = gaussian_convolution(m.shift(c * s), s, sim.n_nodes)
            e = xs[:, None] + c * s + np.sqrt(s) * z[None, :]
            out += (T - t) / sim.z_steps * (flat_hhat(r, L, e) @ (w * z)) / np.sqrt(s)
        LT = gaussian_convolution(m.shift(c * h_), h_, sim.n_nodes)
        e = xs[:, None] + c * h_ + np.sqrt(h_) * z[None, :]
        out += (np.asarray(psi.flat(LT, e), dtype=float) @ (w * z)) / np.sqrt(h_)
        return out

    def z_paths(t, xs, m):
        grid = time_grid(t, T, (T - t) / sim.z_steps)
        dt = np.diff(grid)
        n = sim.n_paths
        seed = int(np.random.SeedSequence([sim.seed, 77, int(round(t * 1e9))]).generate_state(1)[0])
        dW = brownian_increments(seed, n, dt)
        laws = _laws_from(m, t, grid, drift, sim, key=int(round(t * 1e6)) + 5)
        out = np.empty_like(xs)
        for q, x0 in enumerate(xs):
            X = np.full(n, x0)
            Jt = np.ones(n)
            bel = np.zeros(n)
            acc = np.zeros(n)
            for k in range(dt.size):
                bel += Jt * dW[:, k]
                dxp = drift.derivative(grid[k], X)
                X = X + drift(grid[k], X) * dt[k] + dW[:, k]
                Jt = Jt * np.exp(dxp * dt[k])
                s = grid[k + 1] - t
                score = bel / s
                val = psi.flat(laws[-1], X) if k == dt.size - 1 else flat_hhat(grid[k + 1], laws[k + 1], X)
                if k == dt.size - 1:
                    acc += np.asarray(val, dtype=float) * score
                else:
                    acc += dt[k] * np.asarray(val, dtype=float) * score
            out[q] = float(np.mean(acc))
        return out

    def Z(t, x, m):
        xs = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if t >= T:
            return np.asarray(psi.flat_deriv_grad(m, xs), dtype=float).reshape(np.shape(x))
        fn = z_const if c is not None else z_paths
        if xs.size > sim.z_points:
            lat = np.linspace(xs.min(), xs.max(), sim.z_points)
            vals = np.interp(xs, lat, fn(t, lat, m))
        else:
            vals = fn(t, xs, m)
        return vals.reshape(np.shape(x))

    return WbsdeSolution(float(ysol.t0), T, lambda t, m: yfun(t, m), Z, "picard",
                         {"inner_drift": c if c is not None else "path"})


# ------------------------------------------------------------ K-bar operator


def kbar_operator(y: Callable, z: Callable, f, psi: TerminalFunctional, t: float, m: DiscreteMeasure,
                  x, T: float, sim: PicardSim | None = None) -> tuple[float, np.ndarray]:
    """Reduced-equation operator along the pure-Brownian flow from ``m``.

    ``Kbar = int_t^T K(s, L_s) ds + psi(L_T)`` with ``L_s`` the law of
    ``U + W_s - W_t`` and ``K(s, q) = <f(s, ., q, y(s, q), z(s, ., q)), q>``;
    ``flatKbar(x)`` is the score-weighted expectation of the flat
    derivatives of ``K`` and ``psi`` along ``x + W``. Flat derivatives of
    ``K`` are taken by finite differences with step 1e-3; a
    :class:`SeparableYZ` with ``P_bound = 0`` skips ``z``.
    """
    sim = sim or PicardSim()
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if t >= T:
        return psi(m), np.asarray(psi.flat_deriv_grad(m, xs), dtype=float).reshape(np.shape(x))
    skip_z = isinstance(f, SeparableYZ) and f.P_bound == 0.0
    zq, wq = GaussianSpec(0.0, 1.0).quadrature(sim.n_nodes)

    def K(s, q: DiscreteMeasure) -> float:
        yv = y(s, q)
        zv = np.zeros(len(q)) if skip_z else np.asarray(z(s, q.points, q), dtype=float)
        return float(np.dot(q.weights, np.asarray(f(s, q.points, q, yv, zv), dtype=float) * np.ones(len(q))))

    edges = np.linspace(t, T, sim.z_steps + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    ds = (T - t) / sim.z_steps
    kbar = 0.0
    flat = np.zeros(xs.size)
    for s in mids:
        h = s - t
        L = gaussian_convolution(m, h, sim.n_nodes)
        base = K(s, L)
        kbar += ds * base
        e = xs[:, None] + np.sqrt(h) * zq[None, :]
        # constant offsets vanish against the centred weight, so no recentring is needed
        raw = np.array([[(K(s, L.mix(DiscreteMeasure.dirac(v), FD_EPS)) - base) / FD_EPS for v in row]
                        for row in e])
        flat += ds * (raw @ (wq * zq)) / np.sqrt(h)
    h = T - t
    LT = gaussian_convolution(m, h, sim.n_nodes)
    kbar += psi(LT)
    e = xs[:, None] + np.sqrt(h) * zq[None, :]
    flat += (np.asarray(psi.flat(LT, e), dtype=float) @ (wq * zq)) / np.sqrt(h)
    return float(kbar), flat.reshape(np.shape(x))
