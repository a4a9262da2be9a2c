"""Batch experiment runner.

Usage::

    wbsde {solve,verify,mfc,convergence} CONFIG.json [--seed N] [--out DIR] [--threads K]

Exit codes: 0 pass, 1 verification failure, 2 configuration (or I/O) error,
3 numerical non-convergence. ``WBSDE_OUT`` and ``WBSDE_THREADS`` override the
output directory and worker count when the flags are absent.
"""

from __future__ import annotations

import argparse
import copy
import csv
import difflib
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidInputError, NonConvergenceError, WbsdeError
from .explicit import (WbsdeSolution, child_seed, quadratic_solution, solve_affine_generator,
                       solve_quadratic, solve_zero_generator)
from .flows import DRIFT_REGISTRY, make_drift, simulate_flow, time_grid
from .functionals import (FUNCTIONAL_REGISTRY, GENERATOR_REGISTRY, Quadratic, SeparableYZ, Zero,
                          make_functional, make_generator)
from .measures import DiscreteMeasure
from .particles import loglog_slope, particle_convergence

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NONCONV = 0, 1, 2, 3

# named substreams of the config seed
STREAM_FLOW, STREAM_SOLVER, STREAM_CHALLENGER = 1, 2, 3

SCHEMA: dict = {
    "seed": int,
    "problem": {
        "T": float,
        "t0": float,
        "functional": {"name": str, "params": dict},
        "generator": {"name": str, "params": dict},
        "flows": {"mu0": {"points": list, "weights": list}, "drifts": list, "n_paths": int, "dt": float},
        "measures": list,
    },
    "solver": {"name": str, "params": dict},
    "verify": {"suites": list, "tol": float, "check_times": list, "corrupt_y": float},
    "output": {"dir": str, "x_grid": list, "t_grid": list},
    "convergence": {"variable": str, "values": list, "n_outer": int, "n_steps": int, "test_function": str},
    "mfc": {"K": float, "n_actions": int, "T": float, "nu": {"points": list, "weights": list},
            "n_paths": int, "dt": float, "n_challengers": int, "tol": float, "negate_z": bool},
    "pde": {"terminal": str, "source": str, "source_scale": float, "drift": float, "perturb": float,
            "pde_tol": float},
}

DEFAULTS: dict = {
    "seed": 0,
    "problem": {
        "T": 1.0, "t0": 0.0,
        "functional": {"name": "logistic-cylinder", "params": {}},
        "generator": {"name": "zero", "params": {}},
        "flows": {"mu0": {"points": [-1.0, 0.2, 1.0], "weights": [0.3, 0.4, 0.3]},
                  "drifts": [{"name": "zero"}, {"name": "constant", "c": 0.5}, {"name": "tanh"},
                             {"name": "sin-tanh"}, {"name": "piecewise"}],
                  "n_paths": 10000, "dt": 0.01},
        "measures": [{"points": [0.0]}, {"points": [-1.0, 0.2, 1.0], "weights": [0.3, 0.4, 0.3]},
                     {"points": [-0.5, 1.5]}],
    },
    "solver": {"name": "explicit-zero", "params": {}},
    "verify": {"suites": ["residual"], "tol": None, "check_times": None, "corrupt_y": 0.0},
    "output": {"dir": "wbsde_out", "x_grid": [-3.0, 3.0, 13], "t_grid": None},
    "convergence": {"variable": "n", "values": [8, 32, 128, 512], "n_outer": 2000, "n_steps": 10,
                    "test_function": "bump"},
    "mfc": {"K": 3.0, "n_actions": 601, "T": 0.5, "nu": {"points": [0.0]}, "n_paths": 10000,
            "dt": 0.01, "n_challengers": 50, "tol": 0.02, "negate_z": False},
    "pde": {"terminal": "tanh", "source": "cos", "source_scale": 0.3, "drift": 0.4, "perturb": 0.0,
            "pde_tol": 1e-6},
}

SOLVERS = ("explicit-zero", "affine", "quadratic", "picard")
SUITES = ("residual", "pde", "mfc")


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


# scalar test functions with first and second derivatives
FUNCTIONS: dict = {
    "tanh": (np.tanh, _sech2, lambda x: -2 * np.tanh(x) * _sech2(x)),
    "sin": (np.sin, np.cos, lambda x: -np.sin(x)),
    "cos": (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)),
    "bump": (lambda x: 1 - 1 / (1 + x * x), lambda x: 2 * x / (1 + x * x) ** 2,
             lambda x: (2 - 6 * x * x) / (1 + x * x) ** 3),
}


# ------------------------------------------------------------------ config


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=3)
    return f"; did you mean {', '.join(close)}?" if close else ""


def _validate(cfg, schema, path: str) -> None:
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config key {path or '<root>'!r} must be an object")
    for key, val in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigurationError(f"unknown config key {where!r}{_suggest(key, schema)}")
        rule = schema[key]
        if val is None:
            continue
        if isinstance(rule, dict):
            _validate(val, rule, where)
        elif rule is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigurationError(f"config key {where!r} must be a number")
        elif rule is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigurationError(f"config key {where!r} must be an integer")
        elif not isinstance(val, rule):
            raise ConfigurationError(f"config key {where!r} must be of type {rule.__name__}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("params",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> dict:
    """Read, validate and complete a JSON config; apply CLI/env overrides."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}") from None
    _validate(raw, SCHEMA, "")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    out = out or os.environ.get("WBSDE_OUT")
    if out:
        cfg["output"]["dir"] = out
    _check_names(cfg)
    return cfg


def _check_names(cfg: dict) -> None:
    prob = cfg["problem"]
    for block, reg in (("functional", FUNCTIONAL_REGISTRY), ("generator", GENERATOR_REGISTRY)):
        name = prob[block].get("name")
        if name not in reg:
            raise ConfigurationError(f"config key 'problem.{block}.name': unknown {block} {name!r}"
                                     f"{_suggest(str(name), reg)}")
    for i, d in enumerate(prob["flows"]["drifts"]):
        if not isinstance(d, dict) or "name" not in d:
            raise ConfigurationError(f"config key 'problem.flows.drifts[{i}]' needs a 'name'")
        if d["name"] not in DRIFT_REGISTRY:
            raise ConfigurationError(f"config key 'problem.flows.drifts[{i}].name': unknown drift "
                                     f"{d['name']!r}{_suggest(d['name'], DRIFT_REGISTRY)}")
    name = cfg["solver"]["name"]
    if name not in SOLVERS:
        raise ConfigurationError(f"config key 'solver.name': unknown solver {name!r}{_suggest(name, SOLVERS)}")
    for key in ("terminal", "source"):
        fn = cfg["pde"][key]
        if fn not in FUNCTIONS:
            raise ConfigurationError(f"config key 'pde.{key}': unknown function {fn!r}{_suggest(fn, FUNCTIONS)}")
    fn = cfg["convergence"]["test_function"]
    if fn not in FUNCTIONS:
        raise ConfigurationError(f"config key 'convergence.test_function': unknown function {fn!r}"
                                 f"{_suggest(fn, FUNCTIONS)}")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config; the output directory is left out."""
    body = copy.deepcopy(cfg)
    body.get("output", {}).pop("dir", None)
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _measure(spec: dict, where: str) -> DiscreteMeasure:
    try:
        return DiscreteMeasure(np.asarray(spec["points"], dtype=float),
                               None if spec.get("weights") is None else np.asarray(spec["weights"], dtype=float))
    except KeyError:
        raise ConfigurationError(f"config key {where + '.points'!r} is required") from None
    except (InvalidInputError, ValueError, TypeError) as exc:
        raise ConfigurationError(f"config key {where!r}: {exc}") from None


def _params(block: dict, where: str) -> dict:
    p = block.get("params") or {}
    if not isinstance(p, dict):
        raise ConfigurationError(f"config key {where + '.params'!r} must be an object")
    return p


def _build(factory, name: str, params: dict, where: str):
    try:
        return factory(name, **params)
    except TypeError as exc:
        raise ConfigurationError(f"config key {where + '.params'!r}: {exc}") from None


# ------------------------------------------------------------------ problem assembly


def _constant_p(P, t0: float, T: float) -> float:
    """The constant value of a separable generator's ``P``, probed on a grid."""
    xs = np.linspace(-5.0, 5.0, 11)
    vals = np.concatenate([np.asarray(P(t, xs), dtype=float) * np.ones_like(xs) for t in (t0, 0.5 * (t0 + T), T)])
    if np.ptp(vals) > 0:
        raise ConfigurationError("config key 'problem.generator': the picard runner needs a constant z-coefficient")
    return float(vals[0])


class Experiment:
    """Objects built from a validated config."""

    def __init__(self, cfg: dict, threads: int = 1):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.threads = max(1, int(threads))
        prob = cfg["problem"]
        self.T = float(prob["T"])
        self.t0 = float(prob["t0"])
        if not self.T > self.t0:
            raise ConfigurationError("config key 'problem.T' must exceed 'problem.t0'")
        self.psi = _build(make_functional, prob["functional"]["name"],
                          _params(prob["functional"], "problem.functional"), "problem.functional")
        self.f = _build(make_generator, prob["generator"]["name"],
                        _params(prob["generator"], "problem.generator"), "problem.generator")
        self.measures = [_measure(m, f"problem.measures[{i}]") for i, m in enumerate(prob["measures"])]
        if not self.measures:
            raise ConfigurationError("config key 'problem.measures' must not be empty")

    def flows(self):
        spec = self.cfg["problem"]["flows"]
        mu0 = _measure(spec["mu0"], "problem.flows.mu0")
        ts = time_grid(self.t0, self.T, float(spec["dt"]))
        out = []
        for i, d in enumerate(spec["drifts"]):
            params = {k: v for k, v in d.items() if k != "name"}
            drift = _build(make_drift, d["name"], params, f"problem.flows.drifts[{i}]")
            out.append(simulate_flow(drift, mu0, self.t0, ts, int(spec["n_paths"]),
                                     seed=child_seed(self.seed, STREAM_FLOW, i)))
        return out

    def solve(self) -> tuple[WbsdeSolution, dict]:
        """Run the configured solver; returns the solution and extra log records."""
        name = self.cfg["solver"]["name"]
        p = _params(self.cfg["solver"], "solver")
        seed = child_seed(self.seed, STREAM_SOLVER)
        f = self.f
        try:
            if name == "explicit-zero":
                if not isinstance(f, Zero):
                    raise ConfigurationError("config key 'solver.name': explicit-zero needs generator 'zero'")
                return solve_zero_generator(self.psi, self.T, seed=seed, t0=self.t0, **p), {}
            if name == "affine":
                if not isinstance(f, SeparableYZ):
                    raise ConfigurationError("config key 'solver.name': affine needs generator 'affine'")
                gp = _params(self.cfg["problem"]["generator"], "problem.generator")
                if self.cfg["problem"]["generator"]["name"] != "affine":
                    raise ConfigurationError("config key 'solver.name': affine needs generator 'affine'")
                return solve_affine_generator(self.psi, self.T, t0=self.t0, **gp, **p), {}
            if name == "quadratic":
                if not isinstance(f, Quadratic):
                    raise ConfigurationError("config key 'solver.name': quadratic needs generator 'quadratic'")
                sol = quadratic_solution(self.psi, self.T, t0=self.t0, **p)
                return sol, {"gibbs": self._gibbs_records(p)}
            if name == "picard":
                return self._picard(p)
        except TypeError as exc:
            raise ConfigurationError(f"config key 'solver.params': {exc}") from None
        raise ConfigurationError(f"config key 'solver.name': unknown solver {name!r}")

    def _gibbs_records(self, p: dict) -> list:
        recs = []
        for t in self.t_grid():
            if t >= self.T:
                continue
            for i, m in enumerate(self.measures):
                _, st, _ = solve_quadratic(self.psi, t, m, self.T, **p)
                recs.append({"t": t, "measure_id": i, "iterations": st.iterations, "sup_gap": st.sup_gap,
                             "gaps": list(st.gaps), "objective": list(st.objective), "steps": list(st.steps)})
        return recs

    def _picard(self, p: dict):
        from .picard import PicardSim, concatenate_in_time, picard_solve_piecewise, z_from_y

        f = self.f
        if not isinstance(f, SeparableYZ):
            raise ConfigurationError("config key 'problem.generator.name': picard needs a separable generator")
        P = _constant_p(f.P, self.t0, self.T)
        simkw = {k: p.pop(k) for k in list(p) if k in ("n_knots", "sub_steps", "n_nodes", "n_paths")}
        sim = PicardSim(seed=child_seed(self.seed, STREAM_SOLVER), **simkw)
        if "test_functions" not in p and self.psi.cylinder is not None:
            # the terminal's inner functions join the moment features
            p["test_functions"] = tuple(g for g, _, _ in self.psi.cylinder.inner)
        pieces = picard_solve_piecewise(f, P, self.psi, t0=self.t0, T=self.T, sim=sim, **p)
        ysol = pieces[0] if len(pieces) == 1 else concatenate_in_time(pieces)
        log = [{"piece": j, "iter": i, "gap": g, "rho": (r if np.isfinite(r) else None)}
               for j, pc in enumerate(pieces) for i, (g, r) in enumerate(zip(pc.gaps, pc.rhos))]
        if len(pieces) == 1:
            sol = z_from_y(ysol, f, P, self.psi, sim)
        else:
            sol = ysol
        return sol, {"picard_log": log}

    def t_grid(self) -> list:
        g = self.cfg["output"]["t_grid"]
        if g is None:
            return [float(t) for t in np.linspace(self.t0, self.T, 5)]
        return [float(t) for t in g]

    def x_grid(self) -> np.ndarray:
        g = self.cfg["output"]["x_grid"]
        try:
            lo, hi, n = g
            return np.linspace(float(lo), float(hi), int(n))
        except (TypeError, ValueError):
            raise ConfigurationError("config key 'output.x_grid' must be [lo, hi, n]") from None

    def pmap(self, fn, items):
        if self.threads == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))


# ------------------------------------------------------------------ output


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class Writer:
    """Single-threaded file writer recording content hashes for the manifest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def text(self, name: str, content: str) -> Path:
        path = self.root / name
        path.write_text(content)
        self.files[name] = hashlib.sha256(content.encode()).hexdigest()
        return path

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header: list, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)
        return self.text(name, buf.getvalue())

    def manifest(self, cfg: dict, command: str, extra: dict | None = None) -> Path:
        from . import __version__

        body = {"command": command, "config_sha256": config_hash(cfg), "seed": cfg["seed"],
                "package_version": __version__, "files": dict(sorted(self.files.items()))}
        body.update(extra or {})
        return self.json("manifest.json", body)


def _residual_json(rep) -> dict:
    return json.loads(rep.to_json())


# ------------------------------------------------------------------ subcommands


def run_solve(cfg: dict, threads: int = 1) -> int:
    exp = Experiment(cfg, threads)
    sol, extra = exp.solve()
    out = Writer(cfg["output"]["dir"])
    ts, xs = exp.t_grid(), exp.x_grid()
    yrows, zrows = [], []
    for t in ts:
        for i, m in enumerate(exp.measures):
            yrows.append([_fmt(t), i, _fmt(sol.Y(t, m))])
            z = np.asarray(sol.Z(t, xs, m), dtype=float) * np.ones_like(xs)
            zrows.extend([_fmt(t), _fmt(x), i, _fmt(v)] for x, v in zip(xs, z))
    out.csv("Y.csv", ["t", "measure_id", "Y"], yrows)
    out.csv("Z.csv", ["t", "x", "measure_id", "Z"], zrows)
    out.json("measures.json", [json.loads(m.to_json()) for m in exp.measures])
    log = [{"solver": cfg["solver"]["name"], "provenance": sol.provenance}]
    log += extra.get("picard_log", [])
    out.text("solver_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    if "gibbs" in extra:
        out.json("gibbs_convergence.json", extra["gibbs"])
    out.manifest(cfg, "solve")
    return EXIT_PASS


def _suite_residual(exp: Experiment, out: Writer) -> bool:
    sol, _ = exp.solve()
    shift = float(exp.cfg["verify"]["corrupt_y"] or 0.0)
    if shift:
        sol = sol.shifted(shift)
    vcfg = exp.cfg["verify"]
    flows = exp.flows()

    from .verify import wbsde_residual

    reps = exp.pmap(lambda fl: wbsde_residual(sol, exp.f, exp.psi, fl, vcfg["check_times"], vcfg["tol"]), flows)
    ok = True
    for i, rep in enumerate(reps):
        out.json(f"residual_{i}.json", _residual_json(rep))
        out.text(f"residual_{i}.csv", rep.to_csv())
        ok &= bool(rep.passed)
    return ok


def _pde_parts(cfg: dict):
    from .pde import PdeData, TimeCylinder, classical_cylinder

    p = cfg["pde"]
    G = FUNCTIONS[p["terminal"]]
    s = float(p["source_scale"])
    g0, g1, g2 = FUNCTIONS[p["source"]]
    ell = (lambda x: s * g0(x), lambda x: s * g1(x), lambda x: s * g2(x))
    b = float(p["drift"])
    T = float(cfg["problem"]["T"])
    u = classical_cylinder(G, ell, b, T)
    c = float(p["perturb"] or 0.0)
    if c:
        one = (lambda t, x: 1.0 + 0 * x, lambda t, x: 0 * x, lambda t, x: 0 * x)
        u = u.plus(TimeCylinder(lambda t, v: c * (T - t) * v[0], lambda t, v: np.array([c * (T - t)]), [one]))
    data = PdeData(lambda t, x, m: b + 0 * x, lambda t, x, m, r, q: s * g0(x), abs(b), abs(s))
    return u, data


def _suite_pde(exp: Experiment, out: Writer) -> bool:
    from .pde import duality_equivalence_check

    u, data = _pde_parts(exp.cfg)
    flows = exp.flows()[:3]
    rep = duality_equivalence_check(u, data, flows, tol=exp.cfg["verify"]["tol"],
                                    pde_tol=float(exp.cfg["pde"]["pde_tol"]))
    out.json("pde_duality.json", json.loads(rep.to_json()))
    return bool(rep.pde_pass and rep.wbsde_pass)


def _mfc_report(exp: Experiment):
    from .mfc import MfcSim, entropic_problem, verify_optimality

    m = exp.cfg["mfc"]
    T = float(m["T"])
    prob = entropic_problem(exp.psi, T=T, K=float(m["K"]), n_actions=int(m["n_actions"]))
    sol = quadratic_solution(exp.psi, T)
    if m["negate_z"]:
        base = sol
        sol = WbsdeSolution(base.t0, base.T, base.Y, lambda t, x, mm: -base.Z(t, x, mm), "negated-z")
    sim = MfcSim(n_paths=int(m["n_paths"]), dt=float(m["dt"]), seed=child_seed(exp.seed, STREAM_CHALLENGER))
    nu = _measure(m["nu"], "mfc.nu")
    return verify_optimality(prob, sol, 0.0, nu, int(m["n_challengers"]), sim, float(m["tol"]))


def _suite_mfc(exp: Experiment, out: Writer) -> bool:
    rep = _mfc_report(exp)
    out.json("mfc_report.json", json.loads(rep.to_json()))
    return bool(rep.passed)


def run_verify(cfg: dict, threads: int = 1) -> int:
    suites = cfg["verify"]["suites"]
    if not suites:
        raise ConfigurationError("config key 'verify.suites' is empty")
    for s in suites:
        if s not in SUITES:
            raise ConfigurationError(f"config key 'verify.suites': unknown suite {s!r}{_suggest(str(s), SUITES)}")
    exp = Experiment(cfg, threads)
    out = Writer(cfg["output"]["dir"])
    runners = {"residual": _suite_residual, "pde": _suite_pde, "mfc": _suite_mfc}
    results = {s: runners[s](exp, out) for s in suites}
    out.json("verify_summary.json", {"suites": results, "pass": all(results.values())})
    out.manifest(cfg, "verify")
    return EXIT_PASS if all(results.values()) else EXIT_FAIL


def run_mfc(cfg: dict, threads: int = 1) -> int:
    exp = Experiment(cfg, threads)
    out = Writer(cfg["output"]["dir"])
    ok = _suite_mfc(exp, out)
    out.manifest(cfg, "mfc")
    return EXIT_PASS if ok else EXIT_FAIL


def _ito_sweep(exp: Experiment, values: list) -> list[dict]:
    from .pde import TimeCylinder, ito_flow_check

    g0, g1, g2 = FUNCTIONS[exp.cfg["convergence"]["test_function"]]
    u = TimeCylinder(lambda t, v: v[0], lambda t, v: np.ones(1),
                     [(lambda t, x: g0(x), lambda t, x: g1(x), lambda t, x: g2(x))],
                     time_deriv=lambda t, m: 0.0)
    spec = exp.cfg["problem"]["flows"]
    mu0 = _measure(spec["mu0"], "problem.flows.mu0")
    d = spec["drifts"][0] if spec["drifts"] else {"name": "zero"}
    drift = _build(make_drift, d["name"], {k: v for k, v in d.items() if k != "name"}, "problem.flows.drifts[0]")
    rows = []
    for dt in values:
        start = time.perf_counter()
        fl = simulate_flow(drift, mu0, exp.t0, time_grid(exp.t0, exp.T, float(dt)), int(spec["n_paths"]),
                           seed=child_seed(exp.seed, STREAM_FLOW))
        dev = ito_flow_check(u, fl)
        rows.append({"value": float(dt), "estimate": dev, "reference": 0.0, "abs_error": dev, "stderr": None,
                     "runtime_ms": round(1e3 * (time.perf_counter() - start), 3)})
    return rows


def run_convergence(cfg: dict, threads: int = 1) -> tuple[int, list[dict], float | None]:
    c = cfg["convergence"]
    values = c["values"]
    if not values:
        raise ConfigurationError("config key 'convergence.values' must not be empty")
    exp = Experiment(cfg, threads)
    if c["variable"] == "n":
        if not isinstance(exp.f, Zero):
            raise ConfigurationError("config key 'convergence.variable': the n-sweep needs generator 'zero'")
        mu0 = _measure(cfg["problem"]["flows"]["mu0"], "problem.flows.mu0")
        ref = solve_zero_generator(exp.psi, exp.T - exp.t0)
        raw = particle_convergence(exp.psi, mu0, exp.T - exp.t0, [int(n) for n in values],
                                   lambda cloud: ref.Y(0.0, cloud), n_outer=int(c["n_outer"]),
                                   n_steps=int(c["n_steps"]), seed=child_seed(exp.seed, STREAM_SOLVER))
        rows = [{"value": r["n"], "estimate": r["Y0_estimate"], "reference": r["reference"],
                 "abs_error": r["abs_error"], "stderr": r["stderr"], "runtime_ms": r["runtime_ms"]} for r in raw]
    elif c["variable"] == "dt":
        rows = _ito_sweep(exp, values)
    else:
        raise ConfigurationError(f"config key 'convergence.variable': expected 'n' or 'dt', got {c['variable']!r}"
                                 f"{_suggest(str(c['variable']), ('n', 'dt'))}")
    slope = loglog_slope([r["value"] for r in rows], [r["abs_error"] for r in rows]) if len(rows) > 1 else None
    out = Writer(cfg["output"]["dir"])
    cell = lambda v: "" if v is None else _fmt(v)
    out.csv("convergence.csv", ["variable", "value", "estimate", "reference", "abs_error", "stderr", "slope",
                                "runtime_ms"],
            [[c["variable"], r["value"], cell(r["estimate"]), cell(r["reference"]), cell(r["abs_error"]),
              cell(r["stderr"]), cell(slope), r["runtime_ms"]] for r in rows])
    out.manifest(cfg, "convergence")
    return EXIT_PASS, rows, slope


# ------------------------------------------------------------------ entry point


def _threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("WBSDE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"WBSDE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="wbsde", description="W-BSDE solvers and verification suites")
    ap.add_argument("command", choices=["solve", "verify", "mfc", "convergence"])
    ap.add_argument("config", help="JSON experiment config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        threads = _threads(args.threads)
        if args.command == "solve":
            code = run_solve(cfg, threads)
        elif args.command == "verify":
            code = run_verify(cfg, threads)
        elif args.command == "mfc":
            code = run_mfc(cfg, threads)
        else:
            code = run_convergence(cfg, threads)[0]
    except ConfigurationError as exc:
        print(f"wbsde: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"wbsde: non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except OSError as exc:
        print(f"wbsde: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WbsdeError as exc:
        print(f"wbsde: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = "pass" if code == EXIT_PASS else "FAIL"
    print(f"wbsde {args.command}: {status} (out: {cfg['output']['dir']})")
    return code


if __name__ == "__main__":
    sys.exit(main())
