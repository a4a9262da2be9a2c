"""Backward least-squares Monte Carlo for the n-particle BSDE system.

Each particle moves as ``X^i = x^i + W^i``. The common value ``Y^n`` and the
rescaled controls ``n Z^i`` are regressed on symmetric statistics of the
cloud (empirical moments) crossed with the particle's own monomials.
"""

from __future__ import annotations

import csv
import time as _time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .explicit import WbsdeSolution, child_seed
from .flows import BLOCK, _block_rng
from .functionals import Quadratic, TerminalFunctional, cylinder_on_clouds
from .measures import DiscreteMeasure

__all__ = [
    "BasisSpec",
    "ParticleBsdePaths",
    "solve_n_particle",
    "classical_lsmc",
    "aggregate_solution",
    "in_moment_hull",
    "quadratic_particle_exact",
    "QuadraticParticleResult",
    "quadratic_limits",
    "quadratic_limit_table",
    "quantile_positions",
    "particle_convergence",
    "loglog_slope",
    "write_convergence_csv",
]


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis: cloud moments ``1..moments`` times own monomials ``0..own_degree``.

    With a single particle the product collapses to plain monomials of
    degree ``moments + own_degree``.
    """

    moments: int = 3
    own_degree: int = 3
    ridge: float = 1e-8

    def describe(self) -> str:
        return f"moments<= {self.moments} x own<= {self.own_degree}"


@dataclass(frozen=True, eq=False)
class ParticleBsdePaths:
    """Solution of the n-particle system on a time grid.

    Attributes
    ----------
    Yn : ndarray, shape (n_times,)
        Outer average of the fitted common value.
    Zn : ndarray, shape (n, n_times)
        Outer average of the fitted ``n Z^i``.
    Y_paths : ndarray, shape (n_outer, n_times)
        Fitted common value per outer sample.
    nZ_paths : ndarray, shape (n_outer, n, n_times - 1)
    states : ndarray, shape (n_outer, n, n_times)
    """

    n: int
    times: np.ndarray
    Yn: np.ndarray
    Zn: np.ndarray
    basis_spec: BasisSpec
    seed: int
    Y_paths: np.ndarray
    nZ_paths: np.ndarray
    states: np.ndarray
    coef_Y: list
    coef_Z: list
    scaling: list
    moment_ranges: list
    terminal: np.ndarray
    diagnostics: list = field(default_factory=list)
    psi: TerminalFunctional | None = None
    pathwise: np.ndarray | None = None

    @property
    def Y0(self) -> float:
        return float(self.Yn[0])

    @property
    def Y0_stderr(self) -> float:
        """Standard error of ``Y0`` from the spread of the pathwise value
        ``psi(mu^n_T) + sum_k dt * mean_i f``."""
        return float(np.std(self.pathwise, ddof=1) / np.sqrt(self.pathwise.size))


def quantile_positions(m: DiscreteMeasure, n: int) -> np.ndarray:
    """``n`` deterministic particle positions at the mid-quantiles of ``m``."""
    if len(m) == n and np.allclose(m.weights, 1.0 / n):
        return np.sort(m.points)
    order = np.argsort(m.points, kind="stable")
    cw = np.cumsum(m.weights[order])
    u = (np.arange(n) + 0.5) / n
    return m.points[order][np.minimum(np.searchsorted(cw, u, side="left"), len(m) - 1)]


def _standardize(X: np.ndarray) -> tuple[float, float]:
    loc = float(np.mean(X))
    sc = float(np.std(X))
    return loc, (sc if sc > 1e-12 else 1.0)


def _moments(u: np.ndarray, p: int) -> np.ndarray:
    """Cloud moments ``1..p`` along the last axis, with a leading 1."""
    return np.stack([np.ones(u.shape[:-1])] + [np.mean(u**a, axis=-1) for a in range(1, p + 1)], axis=-1)


def _y_pairs(basis: BasisSpec) -> list[tuple[int, int]]:
    pairs = {tuple(sorted((a, b))) for a in range(basis.moments + 1) for b in range(basis.own_degree + 1)}
    return sorted(pairs)


def _features_y(u: np.ndarray, basis: BasisSpec) -> np.ndarray:
    """Symmetric features of clouds ``u`` (shape ``(..., n)``).

    These are the particle averages of the own-particle features, i.e. the
    distinct products of two cloud moments.
    """
    if u.shape[-1] == 1:
        return np.stack([u[..., 0] ** j for j in range(basis.moments + basis.own_degree + 1)], axis=-1)
    M = _moments(u, max(basis.moments, basis.own_degree))
    return np.stack([M[..., a] * M[..., b] for a, b in _y_pairs(basis)], axis=-1)


def _features_z(u: np.ndarray, basis: BasisSpec) -> np.ndarray:
    """Own-particle features, shape ``(..., n, p)``."""
    if u.shape[-1] == 1:
        return _features_y(u, basis)[..., None, :]
    M = _moments(u, basis.moments)
    own = np.stack([u**b for b in range(basis.own_degree + 1)], axis=-1)
    return (M[..., None, :, None] * own[..., :, None, :]).reshape(*u.shape, -1)


def _fit(A: np.ndarray, y: np.ndarray, ridge: float, diag: list, label: str) -> np.ndarray:
    """Least squares with column scaling; ridge fallback when rank-deficient."""
    scale = np.sqrt(np.mean(A * A, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    coef, _, rank, _ = np.linalg.lstsq(As, y, rcond=None)
    if rank < As.shape[1]:
        G = As.T @ As / As.shape[0]
        coef = np.linalg.solve(G + ridge * np.eye(G.shape[0]), As.T @ y / As.shape[0])
        diag.append(f"{label}: rank {rank} < {As.shape[1]}, ridge {ridge:g} applied")
    return coef / scale


def _evaluate_terminal(psi: TerminalFunctional, clouds: np.ndarray) -> np.ndarray:
    if psi.cylinder is not None:
        return cylinder_on_clouds(psi.cylinder, clouds)[0]
    return np.array([psi(DiscreteMeasure(c)) for c in clouds])


def _generator_values(f, t: float, X: np.ndarray, y: np.ndarray, nZ: np.ndarray) -> np.ndarray:
    """Mean over particles of ``f(t, X^i, cloud, y, nZ^i)`` per outer row."""
    if getattr(f, "measure_free", False):
        return np.mean(f(t, X, None, y[:, None], nZ), axis=1)
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        out[r] = np.mean(f(t, X[r], DiscreteMeasure(X[r]), y[r], nZ[r]))
    return out


def _brownian_cube(seed: int, n_outer: int, n: int, dt: np.ndarray) -> np.ndarray:
    out = np.empty((n_outer, n, dt.size))
    sq = np.sqrt(dt)
    rows_per_block = max(1, BLOCK // n)
    for b, start in enumerate(range(0, n_outer, rows_per_block)):
        stop = min(start + rows_per_block, n_outer)
        out[start:stop] = _block_rng(seed, 0, b).standard_normal((stop - start, n, dt.size)) * sq
    return out


def solve_n_particle(f, psi: TerminalFunctional, n: int, times, n_outer: int = 2000,
                     basis: BasisSpec | None = None, seed: int = 0, x0=None,
                     initial: str = "fixed") -> ParticleBsdePaths:
    """Backward LSMC for the n-particle system.

    Parameters
    ----------
    f : generator
        Lipschitz generator ``f(t, x, m, y, z)``; the quadratic one is refused.
    psi : TerminalFunctional
    n : int
        Number of particles.
    times : array_like
        Time grid; the first entry is the initial time.
    x0 : DiscreteMeasure or array_like
        Initial law (placed at quantiles, or sampled per outer row when
        ``initial="iid"``) or explicit positions of length ``n``.
    initial : {"fixed", "iid"}

    Notes
    -----
    Explicit backward Euler: ``n Z^i_k`` is the regression of
    ``n (Y_{k+1} - E_k Y_{k+1}) dW^i_k / dt`` on own-particle features pooled
    over particles, and ``Y_k`` the regression of
    ``Y_{k+1} + dt * mean_i f(t_k, X^i_k, cloud, Y_{k+1}, n Z^i_k)`` on the
    symmetric features. Subtracting the fitted ``E_k Y_{k+1}`` leaves the
    conditional expectation unchanged and lowers the variance.
    """
    if isinstance(f, Quadratic):
        raise ConfigurationError("the quadratic generator is served by quadratic_particle_exact")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    basis = basis or BasisSpec()
    ts = np.asarray(times, dtype=float)
    dt = np.diff(ts)
    N = dt.size
    dW = _brownian_cube(seed, n_outer, n, dt)
    if x0 is None:
        x0 = DiscreteMeasure.dirac(0.0)
    if isinstance(x0, DiscreteMeasure):
        if initial == "iid":
            rng = np.random.default_rng(child_seed(seed, 3))
            start = x0.sample(n_outer * n, rng).reshape(n_outer, n)
        else:
            start = np.broadcast_to(quantile_positions(x0, n), (n_outer, n))
    else:
        pos = np.asarray(x0, dtype=float).ravel()
        if pos.size != n:
            raise ConfigurationError("explicit initial positions must have length n")
        start = np.broadcast_to(pos, (n_outer, n))
    X = np.empty((n_outer, n, ts.size))
    X[:, :, 0] = start
    X[:, :, 1:] = start[:, :, None] + np.cumsum(dW, axis=2)

    diag: list[str] = []
    Y_paths = np.empty((n_outer, ts.size))
    nZ_paths = np.zeros((n_outer, n, N))
    coef_Y: list = [None] * ts.size
    coef_Z: list = [None] * N
    scaling: list = [None] * ts.size
    ranges: list = [None] * ts.size
    terminal = _evaluate_terminal(psi, X[:, :, -1])
    Y_paths[:, -1] = terminal
    for k in range(ts.size):
        loc, sc = _standardize(X[:, :, k])
        scaling[k] = (loc, sc)
        M = _moments((X[:, :, k] - loc) / sc, basis.moments)[:, 1:]
        ranges[k] = (M.min(axis=0), M.max(axis=0))
    Y_next = terminal
    pathwise = terminal.copy()
    for k in range(N - 1, -1, -1):
        loc, sc = scaling[k]
        u = (X[:, :, k] - loc) / sc
        degenerate = np.ptp(X[:, :, k], axis=0).max() < 1e-14
        if degenerate:
            cY = np.full(n_outer, Y_next.mean())
            nZ = np.broadcast_to(n * np.mean((Y_next - cY)[:, None] * dW[:, :, k], axis=0) / dt[k],
                                 (n_outer, n)).copy()
        else:
            FY = _features_y(u, basis)
            cY = FY @ _fit(FY, Y_next, basis.ridge, diag, f"t[{k}] E[Y]")
            FZ = _features_z(u, basis).reshape(n_outer * n, -1)
            target_z = (n * (Y_next - cY)[:, None] * dW[:, :, k] / dt[k]).ravel()
            bZ = _fit(FZ, target_z, basis.ridge, diag, f"t[{k}] Z")
            coef_Z[k] = bZ
            nZ = (FZ @ bZ).reshape(n_outer, n)
        nZ_paths[:, :, k] = nZ
        fk = _generator_values(f, ts[k], X[:, :, k], Y_next, nZ)
        pathwise += dt[k] * fk
        target_y = Y_next + dt[k] * fk
        if degenerate:
            Y_k = np.full(n_outer, target_y.mean())
            coef_Y[k] = ("constant", float(target_y.mean()))
        else:
            bY = _fit(FY, target_y, basis.ridge, diag, f"t[{k}] Y")
            coef_Y[k] = bY
            Y_k = FY @ bY
        Y_paths[:, k] = Y_k
        Y_next = Y_k
    Zn = nZ_paths.mean(axis=0)
    return ParticleBsdePaths(n, ts, Y_paths.mean(axis=0), Zn, basis, int(seed), Y_paths, nZ_paths, X,
                             coef_Y, coef_Z, scaling, ranges, terminal, diag, psi, pathwise)


def classical_lsmc(fbar, g_functional: TerminalFunctional, x0_law: DiscreteMeasure, times,
                   n_outer: int = 20_000, basis: BasisSpec | None = None, seed: int = 0) -> ParticleBsdePaths:
    """Scalar LSMC for the classical BSDE driven by ``X0 + W``.

    This is the one-particle case of :func:`solve_n_particle` with initial
    points drawn from ``x0_law`` so that the regression functions cover its
    support.
    """
    return solve_n_particle(fbar, g_functional, 1, times, n_outer, basis, seed, x0_law, initial="iid")


def in_moment_hull(paths: ParticleBsdePaths, k: int, m: DiscreteMeasure, slack: float = 0.0) -> bool:
    loc, sc = paths.scaling[k]
    M = np.array([np.dot(m.weights, ((m.points - loc) / sc) ** a) for a in range(1, paths.basis_spec.moments + 1)])
    lo, hi = paths.moment_ranges[k]
    width = hi - lo
    return bool(np.all(M >= lo - slack * width) and np.all(M <= hi + slack * width))


def aggregate_solution(paths: ParticleBsdePaths, t0: float | None = None) -> WbsdeSolution:
    """Turn the regression functions into maps ``Y(t, m)`` and ``Z(t, x, m)``.

    For ``n > 1`` the symmetric features are evaluated at the moments of
    ``m``. For ``n = 1`` the fitted function ``u(t, x)`` is integrated against
    ``m`` so that ``Y(t, m) = <u(t, .), m>`` and ``Z(t, x, m) = v(t, x)``.
    Between grid knots values are interpolated linearly in time. Evaluations
    outside the training moment range are recorded in ``info["hull_events"]``.
    """
    ts = paths.times
    basis = paths.basis_spec
    info: dict = {"n": paths.n, "hull_events": []}
    T = float(ts[-1])
    linear = paths.n == 1

    def knot_pair(t):
        if t <= ts[0]:
            return 0, 0, 0.0
        if t >= T:
            return ts.size - 1, ts.size - 1, 0.0
        j = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[j]) / (ts[j + 1] - ts[j])
        if lam < 1e-9:
            return j, j, 0.0
        if lam > 1 - 1e-9:
            return j + 1, j + 1, 0.0
        return j, j + 1, lam

    def y_at(k, m):
        coef = paths.coef_Y[k]
        if isinstance(coef, tuple):
            return coef[1]
        if not in_moment_hull(paths, k, m):
            info["hull_events"].append((float(ts[k]), float(m.mean())))
        loc, sc = paths.scaling[k]
        u = (m.points - loc) / sc
        if linear:
            return float(np.dot(m.weights, _features_y(u[:, None], basis) @ coef))
        M = np.array([np.dot(m.weights, u**a) for a in range(max(basis.moments, basis.own_degree) + 1)])
        return float(np.array([M[a] * M[b] for a, b in _y_pairs(basis)]) @ coef)

    def value_at(k, m):
        if k == ts.size - 1:
            if paths.psi is None:
                raise ValueError("aggregate Y at the horizon needs the terminal functional")
            return paths.psi(m)
        return y_at(k, m)

    def Y(t, m):
        a, b, lam = knot_pair(t)
        ya = value_at(a, m)
        return ya if lam == 0.0 else (1 - lam) * ya + lam * value_at(b, m)

    def z_at(k, x, m):
        k = min(k, ts.size - 2)
        coef = paths.coef_Z[k]
        if coef is None:
            return np.broadcast_to(paths.Zn[:, k].mean(), np.shape(x)).astype(float)
        loc, sc = paths.scaling[k]
        ux = (np.asarray(x, dtype=float) - loc) / sc
        if linear:
            return _features_y(ux[..., None], basis) @ coef
        u = (m.points - loc) / sc
        M = np.array([np.dot(m.weights, u**a) for a in range(basis.moments + 1)])
        own = np.stack([ux**b for b in range(basis.own_degree + 1)], axis=-1)
        F = (M[:, None] * own[..., None, :]).reshape(*ux.shape, -1)
        return F @ coef

    def Z(t, x, m):
        a, b, lam = knot_pair(t)
        za = z_at(a, x, m)
        return za if lam == 0.0 else (1 - lam) * za + lam * z_at(b, x, m)

    return WbsdeSolution(float(ts[0]) if t0 is None else t0, T, Y, Z, "particle", info)


# --------------------------------------------------------------- quadratic


@dataclass(frozen=True)
class QuadraticParticleResult:
    Yn: float
    stderr: float
    nZ: np.ndarray
    positions: np.ndarray


def quadratic_particle_exact(psi: TerminalFunctional, n: int, t: float, m: DiscreteMeasure, T: float,
                             n_inner: int = 100_000, seed: int = 0) -> QuadraticParticleResult:
    """Exact n-particle value for the generator ``z**2 / 2`` by nested Monte Carlo.

    With particles at the mid-quantiles ``x^i`` of ``m``,
    ``Y^n_t = (1/n) log E[exp(n psi(mu^n_T))]`` and
    ``n Z^i_t = E[d_x flat psi(mu^n_T)(X^i_T) e^{n psi}] / E[e^{n psi}]``.
    Both averages share the inner draws and are computed in log-sum-exp form.
    """
    x = quantile_positions(m, n)
    if t >= T:
        val = psi(DiscreteMeasure(x))
        return QuadraticParticleResult(val, 0.0, psi.flat_deriv_grad(DiscreteMeasure(x), x), x)
    rng = np.random.default_rng(child_seed(seed, n, 11))
    XT = x[None, :] + np.sqrt(T - t) * rng.standard_normal((n_inner, n))
    if psi.cylinder is not None:
        vals, grad = cylinder_on_clouds(psi.cylinder, XT)
        dpsi = sum(grad[:, [q]] * fns[1](XT) for q, fns in enumerate(psi.cylinder.inner))
    else:
        vals = np.array([psi(DiscreteMeasure(c)) for c in XT])
        dpsi = np.stack([psi.flat_deriv_grad(DiscreteMeasure(c), c) for c in XT])
    a = n * vals
    amax = a.max()
    w = np.exp(a - amax)
    mean_w = w.mean()
    Yn = (amax + np.log(mean_w)) / n
    stderr = float(np.std(w, ddof=1) / (np.sqrt(n_inner) * mean_w) / n)
    nZ = (w[:, None] * dpsi).sum(axis=0) / w.sum()
    return QuadraticParticleResult(float(Yn), stderr, nZ, x)


def quadratic_limits(g, m: DiscreteMeasure, h: float, n_nodes: int = 96) -> dict:
    """Both candidate large-n limits for ``f = z**2 / 2`` and ``psi = <g, m>``.

    ``product_form = log E[exp(<g(. + W_h), m>)]`` with one common ``W``,
    ``iid_average = <log E[exp(g(. + W_h))], m>``. Gauss-Hermite in ``W``;
    the outer integral against ``m`` is an exact atom sum. By Jensen the
    first never exceeds the second.
    """
    from .measures import GaussianSpec

    z, w = GaussianSpec(0.0, 1.0).quadrature(n_nodes)
    vals = np.asarray(g(m.points[:, None] + np.sqrt(h) * z[None, :]), dtype=float)
    inner = vals.T @ m.weights
    top = inner.max()
    product = float(top + np.log(np.dot(w, np.exp(inner - top))))
    tops = vals.max(axis=1)
    per_atom = tops + np.log(np.exp(vals - tops[:, None]) @ w)
    return {"product_form": product, "iid_average": float(np.dot(m.weights, per_atom))}


def quadratic_limit_table(psi: TerminalFunctional, g, ns: Sequence[int], t: float, m: DiscreteMeasure,
                          T: float, n_inner: int = 100_000, seed: int = 0) -> dict:
    """Tabulate ``Y^n_t`` from :func:`quadratic_particle_exact` against both limits.

    ``g`` is the integrand of the linear ``psi``. Each row carries the gaps
    to the limits at ``m`` and to the limits at the row's own particle cloud
    (the ``n`` mid-quantiles of ``m``). For small ``n`` the cloud differs
    visibly from ``m``, so the verdict uses the cloud-matched gaps at the
    largest ``n``.
    """
    lim = quadratic_limits(g, m, T - t)
    rows = []
    for n in ns:
        r = quadratic_particle_exact(psi, int(n), t, m, T, n_inner, seed)
        cloud = quadratic_limits(g, DiscreteMeasure(r.positions), T - t)
        rows.append({"n": int(n), "Yn": r.Yn, "stderr": r.stderr,
                     "gap_product_form": r.Yn - lim["product_form"], "gap_iid_average": r.Yn - lim["iid_average"],
                     "cloud_product_form": cloud["product_form"], "cloud_iid_average": cloud["iid_average"],
                     "cloud_gap_product_form": r.Yn - cloud["product_form"],
                     "cloud_gap_iid_average": r.Yn - cloud["iid_average"]})
    last = rows[-1]
    closer = ("iid_average" if abs(last["cloud_gap_iid_average"]) < abs(last["cloud_gap_product_form"])
              else "product_form")
    return {"limits": lim, "rows": rows, "closer_at_largest_n": closer}


# -------------------------------------------------------- convergence study


def loglog_slope(ns: Sequence[float], errors: Sequence[float]) -> float | None:
    ns = np.asarray(ns, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = e > 0
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(ns[ok]), np.log(e[ok]), 1)[0])


def particle_convergence(psi: TerminalFunctional, m: DiscreteMeasure, T: float, ns: Sequence[int],
                         reference_fn, n_outer: int = 2000, n_steps: int = 10, seed: int = 0,
                         f=None) -> list[dict]:
    """Run the particle solver for each ``n`` and compare with ``reference_fn``.

    ``reference_fn(cloud)`` returns the reference value at the initial cloud.
    """
    from .functionals import Zero

    f = f or Zero()
    times = np.linspace(0.0, T, n_steps + 1)
    rows = []
    for n in ns:
        t_start = _time.perf_counter()
        paths = solve_n_particle(f, psi, n, times, n_outer, seed=seed, x0=m)
        ref = float(reference_fn(DiscreteMeasure(quantile_positions(m, n))))
        rows.append({"n": n, "seed": seed, "Y0_estimate": paths.Y0, "reference": ref,
                     "abs_error": abs(paths.Y0 - ref), "stderr": paths.Y0_stderr,
                     "runtime_ms": round(1e3 * (_time.perf_counter() - t_start), 3)})
    return rows


def write_convergence_csv(rows: list[dict], path: str | Path, slope: float | None = None) -> None:
    cols = ["n", "seed", "Y0_estimate", "reference", "abs_error", "runtime_ms", "slope"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "slope": "" if slope is None else f"{slope:.6g}"})
