"""Mean-field control on top of solutions of the backward identity.

Costs are estimated on the interacting particle system: at every Euler step
the controlled drift sees the empirical law of the current particles. All
controls evaluated with the same ``seed`` share their Brownian increments and
initial draws (common random numbers), so cost differences carry little
Monte Carlo noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .explicit import WbsdeSolution, child_seed
from .flows import DriftFn, MeasureFlow, brownian_increments, initial_draws, time_grid
from .functionals import HamiltonianSup, TerminalFunctional, hamiltonian_max
from .measures import DiscreteMeasure

__all__ = [
    "MfcProblem",
    "FeedbackControl",
    "MfcSim",
    "OptimalityReport",
    "ControlledValue",
    "evaluate_control",
    "feedback_from_z",
    "verify_optimality",
    "value_from_control",
    "entropic_problem",
    "random_cell_control",
]


@dataclass(frozen=True)
class MfcProblem:
    """Running reward ``L(t, x, m, a)``, drift ``b(t, x, m, a)``, action grid and terminal reward.

    ``measure_free`` declares that ``L`` and ``b`` ignore ``m``.
    """

    L: Callable
    b: Callable
    actions: np.ndarray
    psi: TerminalFunctional
    T: float
    b_bound: float = np.inf
    L_bound: float = np.inf
    measure_free: bool = False

    def hamiltonian(self) -> HamiltonianSup:
        return HamiltonianSup(self.L, self.b, self.actions, self.b_bound, measure_free=self.measure_free)

    def with_reward_shift(self, c: float) -> "MfcProblem":
        L = self.L
        return MfcProblem(lambda t, x, m, a: L(t, x, m, a) + c, self.b, self.actions, self.psi, self.T,
                          self.b_bound, self.L_bound + abs(c), self.measure_free)


def entropic_problem(psi: TerminalFunctional, T: float = 0.5, K: float = 3.0, n_actions: int = 601) -> MfcProblem:
    """``L = -a^2/2``, ``b = a`` on the action grid ``[-K, K]``."""
    return MfcProblem(lambda t, x, m, a: -0.5 * np.asarray(a, dtype=float) ** 2 + 0.0 * x,
                      lambda t, x, m, a: np.asarray(a, dtype=float) + 0.0 * x,
                      np.linspace(-K, K, n_actions), psi, T, b_bound=K, L_bound=0.5 * K * K,
                      measure_free=True)


@dataclass(frozen=True)
class FeedbackControl:
    """Feedback ``(t, x) -> a`` or ``(t, x, m) -> a``.

    ``dx`` is the optional spatial derivative ``(t, x) -> da/dx``.
    """

    eval: Callable
    measure_dependent: bool = False
    name: str = "feedback"
    dx: Callable | None = None

    def __call__(self, t, x, m=None):
        if self.measure_dependent:
            return self.eval(t, x, m)
        return self.eval(t, x)


@dataclass(frozen=True)
class MfcSim:
    n_paths: int = 10_000
    dt: float = 1e-2
    seed: int = 0
    x_lattice: tuple = (-8.0, 8.0, 641)


@dataclass(frozen=True, eq=False)
class _Rollout:
    times: np.ndarray
    paths: np.ndarray
    increments: np.ndarray
    samples: np.ndarray  # per-path reward: int L + linearised terminal term
    J: float


def _check_range(a: np.ndarray, actions: np.ndarray, name: str) -> None:
    lo, hi = actions[0], actions[-1]
    if np.any(a < lo - 1e-12) or np.any(a > hi + 1e-12):
        raise InvalidInputError(f"control {name!r} leaves the action hull [{lo}, {hi}]")


def _rollout(problem: MfcProblem, t: float, nu: DiscreteMeasure, control: Callable, sim: MfcSim,
             name: str = "control") -> _Rollout:
    """Euler particle system under ``control(k, t_k, x, m) -> actions``."""
    ts = time_grid(t, problem.T, sim.dt)
    dt = np.diff(ts)
    n = sim.n_paths
    dW = brownian_increments(sim.seed, n, dt)
    x = initial_draws(nu, n, sim.seed)
    paths = np.empty((n, ts.size))
    paths[:, 0] = x
    running = np.zeros(n)
    acts = np.asarray(problem.actions)
    for k in range(dt.size):
        m = DiscreteMeasure(x)
        a = np.asarray(control(k, ts[k], x, m), dtype=float) * np.ones(n)
        _check_range(a, acts, name)
        running += np.asarray(problem.L(ts[k], x, m, a), dtype=float) * dt[k]
        x = x + np.asarray(problem.b(ts[k], x, m, a), dtype=float) * dt[k] + dW[:, k]
        paths[:, k + 1] = x
    mT = DiscreteMeasure(x)
    terminal = problem.psi(mT)
    lin = np.asarray(problem.psi.flat(mT, x), dtype=float)
    J = float(np.mean(running)) + terminal
    return _Rollout(ts, paths, dW, running + lin, J)


def _stderr(samples: np.ndarray) -> float:
    return float(np.std(samples, ddof=1) / np.sqrt(samples.size))


def evaluate_control(problem: MfcProblem, t: float, nu: DiscreteMeasure, alpha: FeedbackControl,
                     sim: MfcSim | None = None) -> tuple[float, float]:
    """Cost ``E[int_t^T L ds] + psi(mu_T)`` of a feedback and its Monte Carlo stderr.

    The stderr is that of the per-path samples ``int L ds + flat psi(mu_T)(X_T)``.
    """
    sim = sim or MfcSim()
    r = _rollout(problem, t, nu, lambda k, s, x, m: alpha(s, x, m), sim, alpha.name)
    return r.J, _stderr(r.samples)


class _TableFeedback:
    """Actions tabulated on an x lattice at each grid time, interpolated in x."""

    def __init__(self, times: np.ndarray, lattice: np.ndarray, table: np.ndarray):
        self.times = times
        self.lattice = lattice
        self.table = table
        self.slopes = np.gradient(table, lattice, axis=1)

    def _row(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return min(max(k, 0), self.table.shape[0] - 1)

    def __call__(self, t, x):
        return np.interp(np.asarray(x, dtype=float), self.lattice, self.table[self._row(t)])

    def dx(self, t, x):
        return np.interp(np.asarray(x, dtype=float), self.lattice, self.slopes[self._row(t)])


def feedback_from_z(problem: MfcProblem, sol: WbsdeSolution, t: float, nu: DiscreteMeasure,
                    sim: MfcSim | None = None) -> tuple[FeedbackControl, MeasureFlow]:
    """Realised feedback ``a(s, x) = argmax_a L + b Z(s, x, nu_s)`` along its own flow.

    At each Euler step the current particle law ``nu_s`` is frozen, ``Z`` is
    evaluated on an x lattice, the Hamiltonian is maximised there, and the
    particles move with the resulting drift. The returned control tabulates
    the actions per grid time and interpolates linearly in ``x``.
    """
    sim = sim or MfcSim()
    ham = problem.hamiltonian()
    lattice = np.linspace(*sim.x_lattice[:2], int(sim.x_lattice[2]))
    ts = time_grid(t, problem.T, sim.dt)
    table = np.zeros((ts.size, lattice.size))

    def control(k, s, x, m):
        z = np.asarray(sol.Z(s, lattice, m), dtype=float)
        table[k] = hamiltonian_max(ham, s, lattice, m, z).action
        return np.interp(x, lattice, table[k])

    r = _rollout(problem, t, nu, control, sim, "feedback")
    mT = DiscreteMeasure(r.paths[:, -1])
    zT = np.asarray(sol.Z(problem.T, lattice, mT), dtype=float)
    table[-1] = hamiltonian_max(ham, problem.T, lattice, mT, zT).action
    tab = _TableFeedback(ts, lattice, table)
    fb = FeedbackControl(tab, False, "feedback-from-z", dx=tab.dx)
    drift = DriftFn(lambda s, x: problem.b(s, x, None, tab(s, x)), problem.b_bound, "optimal-feedback")
    flow = MeasureFlow(float(t), ts, r.paths, drift, sim.seed, r.increments)
    return fb, flow


def random_cell_control(rng: np.random.Generator, actions: np.ndarray, t: float, T: float,
                        n_t: int = 4, n_x: int = 8, x_range: tuple = (-3.0, 3.0)) -> FeedbackControl:
    """Piecewise-constant feedback on an ``n_t`` by ``n_x`` grid of (time, space) cells."""
    table = rng.choice(actions, size=(n_t, n_x))
    t_edges = np.linspace(t, T, n_t + 1)[1:-1]
    x_edges = np.linspace(*x_range, n_x + 1)[1:-1]

    def ev(s, x):
        i = int(np.searchsorted(t_edges, s, side="right"))
        return table[i][np.searchsorted(x_edges, np.asarray(x, dtype=float), side="right")]

    return FeedbackControl(ev, False, "cells")


def _perturbations(base: FeedbackControl, actions: np.ndarray, rng: np.random.Generator, count: int
                   ) -> list[FeedbackControl]:
    lo, hi = actions[0], actions[-1]
    out = []
    kinds = ("shift", "scale", "wave")
    for j in range(count):
        kind = kinds[j % 3]
        size = float(np.exp(rng.uniform(np.log(0.05), 0.0)) * rng.choice([-1.0, 1.0]))
        freq = float(rng.uniform(0.5, 2.0))
        if kind == "shift":
            fn = lambda s, x, d=size: np.clip(base(s, x) + d, lo, hi)
        elif kind == "scale":
            fn = lambda s, x, d=size: np.clip(base(s, x) * (1 + d), lo, hi)
        else:
            fn = lambda s, x, d=size, w=freq: np.clip(base(s, x) + d * np.sin(w * x), lo, hi)
        out.append(FeedbackControl(fn, False, f"{kind}({size:+g})"))
    return out


@dataclass
class OptimalityReport:
    J_opt: float
    Y: float
    gap: float
    challengers: list
    passed: bool
    stderr_opt: float
    tol: float
    value_pass: bool
    challenger_pass: bool
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        d = {"J_opt": self.J_opt, "Y": self.Y, "gap": self.gap, "challengers": self.challengers,
             "pass": self.passed, "stderr_opt": self.stderr_opt, "tol": self.tol,
             "value_pass": self.value_pass, "challenger_pass": self.challenger_pass, "notes": self.notes}
        return json.dumps(d, indent=2)


def verify_optimality(problem: MfcProblem, sol: WbsdeSolution, t: float, nu: DiscreteMeasure,
                      n_challengers: int = 50, sim: MfcSim | None = None, tol: float = 0.02
                      ) -> OptimalityReport:
    """Compare ``Y(t, nu)`` with the cost of the feedback built from ``Z`` and
    race that feedback against challengers.

    Half of the challengers are random piecewise-constant feedbacks on a
    4 by 8 (time, space) cell grid with actions drawn from the grid; the rest
    perturb the candidate feedback. A challenger beats the candidate when its
    cost exceeds the candidate's by more than twice the combined stderr
    ``sqrt(se_c^2 + se_opt^2)``. The paired (common random numbers) stderr
    of the difference is reported alongside.
    """
    sim = sim or MfcSim()
    fb, _ = feedback_from_z(problem, sol, t, nu, sim)
    base = _rollout(problem, t, nu, lambda k, s, x, m: fb(s, x), sim, fb.name)
    se_opt = _stderr(base.samples)
    Y = float(sol.Y(t, nu))
    gap = abs(Y - base.J)
    rng = np.random.default_rng(child_seed(sim.seed, 31))
    n_cells = n_challengers // 2
    chall = [random_cell_control(rng, problem.actions, t, problem.T) for _ in range(n_cells)]
    chall += _perturbations(fb, problem.actions, rng, n_challengers - n_cells)
    rows = []
    beaten = False
    for i, c in enumerate(chall):
        r = _rollout(problem, t, nu, lambda k, s, x, m, c=c: c(s, x, m), sim, c.name)
        se_c = _stderr(r.samples)
        delta = r.J - base.J
        comb = float(np.hypot(se_c, se_opt))
        wins = bool(delta > 2 * comb)
        beaten |= wins
        rows.append({"id": i, "kind": c.name, "J": r.J, "delta": delta, "stderr": comb,
                     "paired_stderr": _stderr(r.samples - base.samples), "beats": wins})
    value_pass = bool(gap <= tol)
    return OptimalityReport(base.J, Y, gap, rows, value_pass and not beaten, se_opt, tol, value_pass,
                            not beaten)


@dataclass
class ControlledValue:
    Y: float
    stderr: float
    Z: Callable | None
    note: str = ""


def value_from_control(problem: MfcProblem, alpha_opt: FeedbackControl, t: float, nu: DiscreteMeasure,
                       sim: MfcSim | None = None, z_paths: int = 20_000) -> ControlledValue:
    """Value of a feedback assumed optimal, with ``Z`` when derivative data is available.

    For measure-free ``(L, b)`` and a feedback with spatial derivative the
    companion ``Z(s, x, m)`` is the Bismut-Elworthy-Li estimate of the
    x-derivative of ``E[flat psi(mu_T)(X_T) + int_s^T L(r, X_r, a(r, X_r)) dr]``
    along ``X`` started at ``x`` with drift ``b(r, X, a(r, X))``; the
    derivative of that drift is taken by central differences in ``x``
    through the feedback's ``dx``. Otherwise only the value is returned.
    """
    sim = sim or MfcSim()
    J, se = evaluate_control(problem, t, nu, alpha_opt, sim)
    if not problem.measure_free or alpha_opt.dx is None or alpha_opt.measure_dependent:
        return ControlledValue(J, se, None, "value-only: derivative data for the feedback or "
                                            "measure-free reward and drift not declared")
    T = problem.T

    def bhat(s, x):
        return problem.b(s, x, None, alpha_opt(s, x))

    def bhat_dx(s, x, eps=1e-5):
        return (bhat(s, x + eps) - bhat(s, x - eps)) / (2 * eps)

    def Z(s, x, m):
        xs = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if s >= T:
            return np.asarray(problem.psi.flat_deriv_grad(m, xs), dtype=float).reshape(np.shape(x))
        # law of the optimally controlled flow from m, then tangent paths from each x
        ts = time_grid(s, T, sim.dt)
        dt = np.diff(ts)
        sub = MfcSim(min(sim.n_paths, z_paths), sim.dt, child_seed(sim.seed, 41), sim.x_lattice)
        law = _rollout(problem, s, m, lambda k, r, y, q: alpha_opt(r, y), sub, "law")
        mT = DiscreteMeasure(law.paths[:, -1])
        dW = brownian_increments(child_seed(sim.seed, 43), z_paths, dt)
        out = np.empty(xs.size)
        for q, x0 in enumerate(xs):
            X = np.full(z_paths, x0)
            Jt = np.ones(z_paths)
            bel = np.zeros(z_paths)
            acc = np.zeros(z_paths)
            for k in range(dt.size):
                a = alpha_opt(ts[k], X)
                if k > 0:
                    acc += problem.L(ts[k], X, None, a) * dt[k] * bel / (ts[k] - s)
                bel += Jt * dW[:, k]
                d = bhat_dx(ts[k], X)
                X = X + problem.b(ts[k], X, None, a) * dt[k] + dW[:, k]
                Jt = Jt * np.exp(d * dt[k])
            acc += np.asarray(problem.psi.flat(mT, X), dtype=float) * bel / (T - s)
            out[q] = float(np.mean(acc))
        return out.reshape(np.shape(x))

    return ControlledValue(J, se, Z, "")
