"""Executable residual of the backward identity on measure flows, plus
comparison and uniqueness checks between two candidate solutions.

Along a flow ``mu`` of ``dX = B dt + dW`` a solution ``(Y, Z)`` must satisfy,
for each ``t``::

    Y(t, mu_t) = psi(mu_T) + E int_t^T f(s, X_s, mu_s, Y(s, mu_s), Z(s, X_s, mu_s)) ds
                            - E int_t^T Z(s, X_s, mu_s) B(s, X_s) ds

Time integrals use the trapezoid rule on the flow grid.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError
from .explicit import WbsdeSolution
from .flows import MeasureFlow
from .functionals import TerminalFunctional

__all__ = [
    "ResidualReport",
    "FlowTrace",
    "trace_solution",
    "wbsde_residual",
    "comparison_check",
    "uniqueness_check",
]


@dataclass
class ResidualReport:
    """Per-time residuals with Monte Carlo standard errors.

    ``passed`` is true exactly when ``max(residuals) <= tol``.
    """

    times: list
    residuals: list
    stderr: list
    tol: float
    passed: bool
    terminal_residual: float
    mean_abs_f: float
    mean_abs_z: float
    diagnostics: list = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return float(max(self.residuals))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "residual", "stderr", "pass"])
        for t, r, s in zip(self.times, self.residuals, self.stderr):
            w.writerow([f"{t:.10g}", f"{r:.10g}", f"{s:.10g}", int(r <= self.tol)])
        return buf.getvalue()

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json())
        stem.with_suffix(".csv").write_text(self.to_csv())


@dataclass(frozen=True, eq=False)
class FlowTrace:
    """Solution evaluated along a flow from grid index ``start`` onward.

    ``Y`` has one value per grid time; ``Z`` and ``B`` hold one row per path.
    """

    start: int
    Y: np.ndarray
    Z: np.ndarray
    B: np.ndarray


def _drift_values(flow: MeasureFlow, k: int) -> np.ndarray:
    x = flow.paths[:, k]
    m = flow.marginal(k) if flow.drift.measure_dependent else None
    return np.asarray(flow.drift(flow.times[k], x, m), dtype=float) * np.ones_like(x)


def trace_solution(sol: WbsdeSolution, flow: MeasureFlow, start: int = 0) -> FlowTrace:
    """Evaluate ``Y(t_k, mu_k)``, ``Z(t_k, X_k, mu_k)`` and ``B(t_k, X_k)`` for ``k >= start``."""
    n, K = flow.paths.shape
    Y = np.full(K, np.nan)
    Z = np.zeros((n, K))
    B = np.zeros((n, K))
    for k in range(start, K):
        m = flow.marginal(k)
        t = float(flow.times[k])
        Y[k] = sol.Y(t, m)
        B[:, k] = _drift_values(flow, k)
        Z[:, k] = np.asarray(sol.Z(t, flow.paths[:, k], m), dtype=float)
    return FlowTrace(start, Y, Z, B)


def _check_indices(flow: MeasureFlow, check_times: Sequence[float] | None) -> list[int]:
    if check_times is None:
        idx = np.unique(np.linspace(0, flow.times.size - 1, 5).round().astype(int))
        return [int(i) for i in idx]
    return sorted({flow.index_of(t) for t in check_times})


def _backward_trapezoid(g: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """``I[:, k] = int_{t_k}^{T} g`` by trapezoids, per row."""
    seg = 0.5 * (g[:, :-1] + g[:, 1:]) * dt[None, :]
    out = np.zeros_like(g)
    out[:, :-1] = np.cumsum(seg[:, ::-1], axis=1)[:, ::-1]
    return out


def _integrability(abs_z_path: np.ndarray) -> list[str]:
    """Flag a running mean of ``int |Z|`` that keeps growing with the sample size."""
    n = abs_z_path.size
    if n < 64:
        return []
    sizes = [n // 16, n // 4, n]
    means = [float(np.mean(abs_z_path[:s])) for s in sizes]
    if means[0] > 0 and means[1] > 2 * means[0] and means[2] > 2 * means[1]:
        return [f"integrability: running mean of int|Z| grows with sample size {means}"]
    return []


def wbsde_residual(sol: WbsdeSolution, f, psi: TerminalFunctional, flow: MeasureFlow,
                   check_times: Sequence[float] | None = None, tol: float | None = None,
                   trace: FlowTrace | None = None) -> ResidualReport:
    """Residual of the backward identity along ``flow`` at ``check_times``.

    Parameters
    ----------
    sol : WbsdeSolution
        Candidate ``(Y, Z)``; valid only for flows started at or after ``sol.t0``.
    f : callable
        Generator ``f(t, x, m, y, z)``.
    tol : float, optional
        Defaults to ``3 * max(stderr) + 0.5 * dt``.

    Notes
    -----
    The standard error is that of the path samples
    ``flat psi(mu_T)(X_T) + int_t^T (f - Z B) ds``, the linearisation of the
    right-hand side around the flow's law.
    """
    if flow.t0 < sol.t0 - 1e-12:
        raise DomainError(f"flow starts at {flow.t0} before the solution's initial time {sol.t0}")
    idx = _check_indices(flow, check_times)
    start = idx[0]
    tr = trace if trace is not None else trace_solution(sol, flow, start)
    n, K = flow.paths.shape
    mu_T = flow.marginal(K - 1)
    psi_T = psi(mu_T)
    g = np.zeros((n, K))
    abs_f = np.zeros((n, K))
    for k in range(start, K):
        m = flow.marginal(k)
        fv = np.asarray(f(flow.times[k], flow.paths[:, k], m, tr.Y[k], tr.Z[:, k]), dtype=float)
        fv = fv * np.ones(n)
        abs_f[:, k] = np.abs(fv)
        g[:, k] = fv - tr.Z[:, k] * tr.B[:, k]
    dt = flow.dt
    I = _backward_trapezoid(g, dt)
    lin_T = np.asarray(psi.flat(mu_T, flow.paths[:, -1]), dtype=float)
    times, res, se = [], [], []
    for k in idx:
        rhs = psi_T + float(np.mean(I[:, k]))
        res.append(abs(float(tr.Y[k]) - rhs) if k < K - 1 else abs(float(tr.Y[k]) - psi_T))
        se.append(float(np.std(lin_T + I[:, k], ddof=1) / np.sqrt(n)) if k < K - 1 else 0.0)
        times.append(float(flow.times[k]))
    terminal = abs(float(sol.Y(float(flow.times[-1]), mu_T)) - psi_T)
    if tol is None:
        tol = 3.0 * max(se) + 0.5 * float(np.max(dt))
    diag = []
    if terminal > 1e-10:
        diag.append(f"terminal residual {terminal:.3g} exceeds 1e-10")
    iz = _backward_trapezoid(np.abs(tr.Z), dt)[:, start]
    diag += _integrability(iz)
    if_ = _backward_trapezoid(abs_f, dt)[:, start]
    passed = max(res) <= tol
    return ResidualReport(times, res, se, float(tol), bool(passed), terminal, float(np.mean(if_)),
                          float(np.mean(iz)), diag)


# ---------------------------------------------------------- comparison


@dataclass
class ComparisonReport:
    """Margins ``Y2 - Y1`` per flow and check time, with hypothesis bookkeeping."""

    times: list
    margins: list  # one list per flow; None for excluded flows
    excluded: list
    tol: float
    passed: bool
    min_margin: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def comparison_check(sol1: WbsdeSolution, sol2: WbsdeSolution, f1, f2, psi1: TerminalFunctional,
                     psi2: TerminalFunctional, flows: Sequence[MeasureFlow],
                     check_times: Sequence[float] | None = None, tol: float | None = None,
                     hyp_slack: float = 1e-12) -> ComparisonReport:
    """Check ``Y1(t, mu_t) <= Y2(t, mu_t) + tol`` along each flow.

    The hypotheses (``psi1(mu_T) <= psi2(mu_T)`` and the flow-averaged generator
    ordering evaluated at ``sol2``'s ``(Y, Z)``) are tested first; a flow that
    violates them is excluded and listed, not failed. ``tol`` defaults to
    ``3 * stderr + 0.5 * dt`` with the stderr of the two residuals combined.
    """
    if sol1.t0 > sol2.t0 + 1e-12:
        raise DomainError("comparison needs t0 of the first solution <= t0 of the second")
    margins, excluded, tols = [], [], []
    times = None
    for j, flow in enumerate(flows):
        if flow.t0 < sol2.t0 - 1e-12:
            raise DomainError("flows must start at or after the second solution's initial time")
        idx = _check_indices(flow, check_times)
        times = [float(flow.times[k]) for k in idx]
        tr2 = trace_solution(sol2, flow, idx[0])
        mu_T = flow.marginal(flow.times.size - 1)
        ok = psi1(mu_T) <= psi2(mu_T) + hyp_slack
        for k in range(idx[0], flow.times.size):
            if not ok:
                break
            m = flow.marginal(k)
            x = flow.paths[:, k]
            a = np.mean(f1(flow.times[k], x, m, tr2.Y[k], tr2.Z[:, k]) * np.ones(x.size))
            b = np.mean(f2(flow.times[k], x, m, tr2.Y[k], tr2.Z[:, k]) * np.ones(x.size))
            ok = a <= b + hyp_slack
        if not ok:
            excluded.append(j)
            margins.append(None)
            continue
        tr1 = trace_solution(sol1, flow, idx[0])
        margins.append([float(tr2.Y[k] - tr1.Y[k]) for k in idx])
        if tol is None:
            r1 = wbsde_residual(sol1, f1, psi1, flow, times, trace=tr1)
            r2 = wbsde_residual(sol2, f2, psi2, flow, times, trace=tr2)
            se = np.hypot(np.asarray(r1.stderr), np.asarray(r2.stderr))
            tols.append(3.0 * float(np.max(se)) + 0.5 * float(np.max(flow.dt)))
    used = [m for m in margins if m is not None]
    tol_v = float(tol) if tol is not None else (max(tols) if tols else 0.0)
    min_margin = float(min(min(m) for m in used)) if used else float("nan")
    passed = bool(used) and min_margin >= -tol_v
    return ComparisonReport(times or [], margins, excluded, tol_v, passed, min_margin)


# ---------------------------------------------------------- uniqueness


@dataclass
class UniquenessReport:
    """Largest ``|Y1 - Y2|`` and flow-integrated ``E int |(Z1 - Z2) B|`` per flow."""

    y_gaps: list
    zb_gaps: list
    tol: float | None
    passed: bool | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def uniqueness_check(sol1: WbsdeSolution, sol2: WbsdeSolution, f, psi: TerminalFunctional,
                     flows: Sequence[MeasureFlow], check_times: Sequence[float] | None = None,
                     tol: float | None = None) -> UniquenessReport:
    """Compare two solutions of the same problem along flows.

    With ``tol=None`` the gaps are reported without a verdict.
    """
    y_gaps, zb_gaps = [], []
    for flow in flows:
        idx = _check_indices(flow, check_times)
        tr1 = trace_solution(sol1, flow, idx[0])
        tr2 = trace_solution(sol2, flow, idx[0])
        y_gaps.append(float(max(abs(tr1.Y[k] - tr2.Y[k]) for k in idx)))
        d = np.abs((tr1.Z - tr2.Z) * tr1.B)
        zb_gaps.append(float(np.mean(_backward_trapezoid(d, flow.dt)[:, idx[0]])))
    passed = None if tol is None else bool(max(y_gaps) <= tol and max(zb_gaps) <= tol)
    return UniquenessReport(y_gaps, zb_gaps, tol, passed)
