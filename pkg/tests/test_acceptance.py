"""Acceptance criteria 1 to 11, one test each.

Every test records a pass/fail line (printed at the end of the session)
before asserting, so a failing criterion still reports its numbers.
"""

import time

import numpy as np
import pytest
from scipy.optimize import linprog

from wbsde.explicit import (WbsdeSolution, entropic_objective, linear_generator_z, quadratic_solution,
                            solve_affine_generator, solve_quadratic, solve_zero_generator, tangent_processes)
from wbsde.flows import DriftFn, gaussian_score, make_drift, simulate_flow, time_grid
from wbsde.functionals import ClassicalGenerator, SeparableYZ, Zero, constant_functional, linear_functional, \
    make_functional, make_generator
from wbsde.measures import DiscreteMeasure, GaussianSpec, GridDensity, flat_derivative_fd, relative_entropy, \
    wasserstein1
from wbsde.mfc import MfcSim, entropic_problem, verify_optimality
from wbsde.particles import aggregate_solution, classical_lsmc, loglog_slope, particle_convergence, \
    quadratic_limit_table, quadratic_limits
from wbsde.pde import PdeData, TimeCylinder, classical_cylinder, duality_equivalence_check, ito_flow_check, \
    pde_residual
from wbsde.picard import PicardSim, concatenate_in_time, kbar_operator, picard_solve_piecewise, picard_solve_y
from wbsde.verify import comparison_check, wbsde_residual

from conftest import base_measure

M3 = DiscreteMeasure([-1.0, 0.5, 2.0], [0.2, 0.5, 0.3])
CYLINDERS = ("logistic-cylinder", "square-cylinder", "product-cylinder")
sech2 = lambda x: 1 / np.cosh(x) ** 2


def test_c01_zero_generator(corpus, record):
    worst, slowest, lines = 0.0, 0.0, []
    for name in CYLINDERS:
        psi = make_functional(name)
        sol = solve_zero_generator(psi, 1.0, n_mc=10_000, method="mc", seed=1)
        for fl in corpus:
            start = time.perf_counter()
            rep = wbsde_residual(sol, Zero(), psi, fl)
            slowest = max(slowest, time.perf_counter() - start)
            worst = max(worst, rep.max_residual)
            lines.append(f"{name}/{fl.drift.name}={rep.max_residual:.4f}")
    ok = worst <= 0.02 and slowest <= 120.0
    print("  ".join(lines))
    record(1, ok, f"max residual {worst:.4f} <= 0.02 over 15 pairs, slowest pair {slowest:.1f}s")
    assert ok


def test_c02_classical_reduction(corpus, record):
    psi = make_functional("tanh-linear")
    f = ClassicalGenerator(lambda t, x, z: 0.5 * np.sin(z) + 0.2 * np.cos(x), lip_z=0.5)
    law = DiscreteMeasure(np.linspace(-3, 3, 61))
    paths = classical_lsmc(f, psi, law, corpus[0].times, n_outer=20_000, seed=1)
    sol = aggregate_solution(paths)
    res = [wbsde_residual(sol, f, psi, fl).max_residual for fl in corpus]
    ok = max(res) <= 0.03
    record(2, ok, f"max residual {max(res):.4f} <= 0.03 on 5 flows ({', '.join(f'{r:.4f}' for r in res)})")
    assert ok


def test_c03_particle_convergence(record):
    psi = make_functional("logistic-cylinder")
    mu0 = base_measure()
    ref = solve_zero_generator(psi, 1.0).Y(0.0, mu0)
    rows = particle_convergence(psi, mu0, 1.0, [8, 32, 128, 512], lambda cloud: ref, n_outer=2000, seed=4)
    err = [r["abs_error"] for r in rows]
    se = [r["stderr"] for r in rows]
    ups = [k for k in range(3) if err[k + 1] > err[k]]
    monotone = len(ups) <= 1 and all(err[k + 1] - err[k] <= np.hypot(se[k], se[k + 1]) for k in ups)
    slope = loglog_slope([r["n"] for r in rows], err)
    for r in rows:
        print(f"  n={r['n']:4d} Y0={r['Y0_estimate']:.5f} err={r['abs_error']:.5f} se={r['stderr']:.5f}")
    ok = monotone and err[-1] <= 0.05
    record(3, ok, f"errors {', '.join(f'{e:.4f}' for e in err)}; inversions {len(ups)}; "
                  f"n=512 error {err[-1]:.4f} <= 0.05; log-log slope {slope:.3f}")
    assert ok


def test_c04_gibbs_fixed_point(record):
    _, lin, _ = solve_quadratic(make_functional("tanh-linear"), 0.5, M3, 1.0)
    psi = make_functional("logistic-cylinder")
    v, st, _ = solve_quadratic(psi, 0.0, M3, 1.0)
    rng = np.random.default_rng(8)
    z = st.z_grid
    gamma = GaussianSpec(0.0, 1.0)
    best = -np.inf
    for _ in range(200):
        th = rng.normal(0, [0.8, 0.4, 0.8])
        logd = -0.5 * z**2 + th[0] * z - 0.5 * abs(th[1]) * z**2 + th[2] * np.tanh(z)
        cand = GridDensity.from_unnormalized(z, np.exp(logd - logd.max()))
        best = max(best, entropic_objective(psi, cand, M3, gamma))
    ok = (lin.iterations == 1 and lin.sup_gap <= 1e-8 and st.iterations <= 50 and st.sup_gap <= 1e-8
          and best <= v + 1e-6)
    record(4, ok, f"linear: {lin.iterations} sweep, gap {lin.sup_gap:.1e}; logistic: {st.iterations} iterations, "
                  f"gap {st.sup_gap:.1e}; value {v:.6f} vs best of 200 tilts {best:.6f}")
    assert ok


def test_c05_quadratic_limit_table(record):
    psi = make_functional("tanh-linear")
    table = quadratic_limit_table(psi, np.tanh, [1, 2, 4, 8], 0.5, M3, 1.0, n_inner=100_000, seed=0)
    fine = quadratic_limits(np.tanh, M3, 0.5, n_nodes=200)
    quad_err = max(abs(table["limits"][k] - fine[k]) for k in fine)
    lim = table["limits"]
    print(f"  product-form limit {lim['product_form']:.6f}   iid-average limit {lim['iid_average']:.6f}")
    for r in table["rows"]:
        print(f"  n={r['n']} Yn={r['Yn']:.5f} se={r['stderr']:.5f} "
              f"gap_product={r['gap_product_form']:+.5f} gap_iid={r['gap_iid_average']:+.5f} | same cloud: "
              f"gap_product={r['cloud_gap_product_form']:+.5f} gap_iid={r['cloud_gap_iid_average']:+.5f}")
    worst_se = max(r["stderr"] for r in table["rows"])
    ok = worst_se <= 0.01 and quad_err <= 1e-6
    record(5, ok, f"table for n=1,2,4,8 with max stderr {worst_se:.4f} <= 0.01, limits to {quad_err:.1e}; "
                  f"on the same particle cloud the largest n is closer to {table['closer_at_largest_n']}")
    assert ok


def test_c06_comparison(corpus, record):
    flows = [corpus[0], corpus[2], corpus[4]]
    rng = np.random.default_rng(2024)
    names = ("tanh-linear", "logistic-cylinder", "product-cylinder")
    passed, worst = 0, np.inf
    for _ in range(20):
        psi = make_functional(names[rng.integers(3)])
        decay, drift = rng.uniform(0, 1), rng.uniform(-0.5, 0.5)
        s1 = rng.uniform(-0.3, 0.3)
        s2 = s1 + rng.uniform(0, 0.3)
        psi1 = psi.shifted(-rng.uniform(0, 0.3))
        f1 = make_generator("affine", decay=decay, source=s1, drift=drift)
        f2 = make_generator("affine", decay=decay, source=s2, drift=drift)
        y1 = solve_affine_generator(psi1, 1.0, decay, s1, drift)
        y2 = solve_affine_generator(psi, 1.0, decay, s2, drift)
        rep = comparison_check(y1, y2, f1, f2, psi1, psi, flows)
        passed += bool(rep.passed)
        worst = min(worst, rep.min_margin)
    ok = passed == 20
    record(6, ok, f"{passed}/20 ordered pairs hold on 3 flows; smallest margin {worst:+.4f}")
    assert ok


def test_c07_mfc(record):
    psi = make_functional("tanh-linear")
    prob = entropic_problem(psi, T=0.5)
    sol = quadratic_solution(psi, 0.5)
    nu = DiscreteMeasure.dirac(0.0)
    rep = verify_optimality(prob, sol, 0.0, nu, 50, MfcSim(10_000))
    neg = WbsdeSolution(sol.t0, sol.T, sol.Y, lambda t, x, m: -sol.Z(t, x, m), "negated-z")
    bad = verify_optimality(prob, neg, 0.0, nu, 50, MfcSim(10_000))
    beats = sum(r["beats"] for r in rep.challengers)
    ok = rep.gap <= 0.02 and beats == 0 and not bad.passed
    record(7, ok, f"|Y - J| = {rep.gap:.4f} <= 0.02, {beats}/50 challengers beat; negated Z: gap {bad.gap:.3f}, "
                  f"{sum(r['beats'] for r in bad.challengers)}/50 beat, passed={bad.passed}")
    assert ok


def test_c08_pde_duality(corpus, record):
    G = (np.tanh, sech2, lambda x: -2 * np.tanh(x) * sech2(x))
    ell = (lambda x: 0.3 * np.cos(x), lambda x: -0.3 * np.sin(x), lambda x: -0.3 * np.cos(x))
    data = PdeData(lambda t, x, m: 0.4 + 0 * x, lambda t, x, m, r, p: 0.3 * np.cos(x), 0.4, 0.3)
    u = classical_cylinder(G, ell, 0.4, 1.0)
    flows = corpus[:3]
    pointwise = max(abs(pde_residual(u, data, t, m)) for t in (0.0, 0.3, 0.9, 0.99)
                    for m in (M3, base_measure(), DiscreteMeasure.dirac(0.7)))
    rep = duality_equivalence_check(u, data, flows)
    bump = TimeCylinder(lambda t, v: 0.1 * (1 - t) * v[0], lambda t, v: np.array([0.1 * (1 - t)]),
                        [(lambda t, x: 1 + 0 * x, lambda t, x: 0 * x, lambda t, x: 0 * x)])
    bad = duality_equivalence_check(u.plus(bump), data, flows)
    inner = (lambda t, x: 1 - 1 / (1 + x * x), lambda t, x: 2 * x / (1 + x * x) ** 2,
             lambda t, x: (2 - 6 * x * x) / (1 + x * x) ** 3)
    uu = TimeCylinder(lambda t, v: v[0], lambda t, v: np.ones(1), [inner], time_deriv=lambda t, m: 0.0)
    d = make_drift("tanh")
    gaps = [ito_flow_check(uu, simulate_flow(d, base_measure(), 0.0, time_grid(0, 1, dt), 10_000, seed=9))
            for dt in (0.04, 0.02, 0.01)]
    ratios = np.array(gaps[1:]) / gaps[:-1]
    ok = (pointwise <= 1e-6 and rep.pde_pass and rep.wbsde_pass and not bad.pde_pass and not bad.wbsde_pass
          and bool(np.all((ratios >= 0.3) & (ratios <= 0.7))))
    wres = max(max(r["residuals"]) for r in rep.wbsde)
    record(8, ok, f"pde residual {max(pointwise, rep.pde_residual):.1e}, identity residual {wres:.4f} passes; "
                  f"perturbed fails both ({bad.pde_residual:.3f}); Ito bias ratios {ratios.round(3).tolist()}")
    assert ok


def test_c09_appendix_formula(record):
    d = make_drift("tanh")
    fl = simulate_flow(d, M3, 0.0, time_grid(0, 1, 0.02), 2000, seed=2)
    jbar_zero = bool(np.all(tangent_processes(fl, d, x=0.4).Jbar == 0.0))
    psi = make_functional("tanh-linear")
    kw = dict(n_paths=20_000, dt=0.02, seed=1)
    g, sg = linear_generator_z(d, psi, 0.0, 0.3, M3, 1.0, **kw)
    s, ss = linear_generator_z(d, psi, 0.0, 0.3, M3, 1.0, assembly="simplified", **kw)
    p, sp = linear_generator_z(d, psi, 0.0, 0.3, M3, 1.0, assembly="pathwise", **kw)
    score_err = 0.0
    h, step = 0.3, 1e-5
    for x in np.linspace(-2, 2, 9):
        for y in np.linspace(-2, 2, 9):
            for c in (-0.5, 0.0, 0.7):
                logp = lambda x0: -0.5 * (y - x0 - c * h) ** 2 / h
                fd = (logp(x + step) - logp(x - step)) / (2 * step)
                score_err = max(score_err, abs(gaussian_score(h, y, 0.0, x, c) - fd))
    ok = jbar_zero and abs(g - s) <= 3 * np.hypot(sg, ss) and score_err <= 1e-6
    record(9, ok, f"Jbar == 0: {jbar_zero}; general {g:.4f} vs simplified {s:.4f} (se {sg:.4f}), "
                  f"pathwise {p:.4f} (se {sp:.4f}); score FD error {score_err:.1e}")
    assert ok


def test_c10_picard(record):
    lam, c = 1.0, 0.7
    h = SeparableYZ(h=lambda t, m, y: -lam * y, P=lambda t, x: 0 * x, lip_y=lam, h_bound=lam * c, P_bound=0.0)
    psi = constant_functional(c)
    pieces = picard_solve_piecewise(h, 0.0, psi)
    glued = concatenate_in_time(pieces)
    probes = [M3, DiscreteMeasure([0.0]), DiscreteMeasure([-0.3, 0.8])]
    bench = max(abs(glued.Y(t, m) - c * np.exp(-lam * (1 - t))) for m in probes for t in np.linspace(0, 1, 11))
    rho_ok = all(p.rho <= p.contraction_bound + 0.1 for p in pieces)
    # split check on a short horizon where one shot is allowed
    lam2, T2 = 0.3, 0.5
    g = lambda x: 0.25 * x * x - 0.5 * x + 0.5
    psi2 = linear_functional(g, lambda x: 0.5 * x - 0.5, lambda x: 0.5 + 0 * x, 2.0, 2.0, name="poly")
    h2 = SeparableYZ(h=lambda t, m, y: -lam2 * y, P=lambda t, x: 0 * x, lip_y=lam2, h_bound=2 * lam2, P_bound=0.0)
    tol = 1e-8
    one = picard_solve_y(h2, 0.0, psi2, T=T2, tol=tol, sim=PicardSim(n_knots=21))
    four = concatenate_in_time(picard_solve_piecewise(h2, 0.0, psi2, n_pieces=4, T=T2, tol=tol,
                                                      sim=PicardSim(n_knots=6)))
    split = max(abs(one(t, m) - four.Y(t, m)) for m in probes for t in np.linspace(0, T2, 21))
    # K-bar on the P = 0 instance; 1e-4 covers the midpoint rule in time and the knot interpolation
    ktol = 1e-4
    z = lambda t, x, m: 0 * np.asarray(x, dtype=float)
    bad = lambda t, m: glued.Y(t, m) + 0.1
    kres = max(abs(kbar_operator(glued.Y, z, h, psi, t, m, 0.0, 1.0)[0] - glued.Y(t, m))
               for m in probes[:2] for t in (0.0, 0.5, 0.9))
    kbad = min(abs(kbar_operator(bad, z, h, psi, t, m, 0.0, 1.0)[0] - bad(t, m))
               for m in probes[:2] for t in (0.0, 0.5, 0.9))
    ok = bench <= 0.01 and rho_ok and split <= 2 * tol and kres <= ktol and kbad > ktol
    record(10, ok, f"benchmark error {bench:.1e} with {len(pieces)} pieces; rho {max(p.rho for p in pieces):.3f} "
                   f"vs bound {pieces[0].contraction_bound:.2f}+0.1; split gap {split:.1e} <= 2e-8; "
                   f"K-bar residual {kres:.1e}, corrupted {kbad:.3f} (tol {ktol:g})")
    assert ok


def w1_lp(m, n):
    a, b = m.weights, n.weights
    cost = np.abs(m.points[:, None] - n.points[None, :]).ravel()
    k, l = a.size, b.size
    A = np.zeros((k + l, k * l))
    for i in range(k):
        A[i, i * l:(i + 1) * l] = 1
    for j in range(l):
        A[k + j, j::l] = 1
    return linprog(cost, A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs").fun


def test_c11_measure_algebra(record):
    rng = np.random.default_rng(0)
    w1_err = 0.0
    for _ in range(20):
        m = DiscreteMeasure(rng.normal(0, 2, 4), rng.dirichlet(np.ones(4)))
        n = DiscreteMeasure(rng.normal(0, 2, 4), rng.dirichlet(np.ones(4)))
        w1_err = max(w1_err, abs(wasserstein1(m, n) - w1_lp(m, n)))
    kl_err = 0.0
    for mu, var, rv in [(0.7, 1.0, 1.0), (-1.2, 0.5, 0.5), (0.3, 0.6, 1.3)]:
        exact = 0.5 * (var / rv + mu**2 / rv - 1 + np.log(rv / var))
        kl_err = max(kl_err, abs(relative_entropy(GaussianSpec(mu, var).on_grid(-14, 14, 4001),
                                                  GaussianSpec(0.0, rv)) - exact))
    fd_err, ratios = 0.0, []
    for _ in range(5):
        m = DiscreteMeasure(rng.normal(0, 1, 4), rng.dirichlet(np.ones(4)))
        x = float(rng.normal(0, 1))
        v = m.integrate(np.tanh)
        for U, exact in ((lambda q: q.integrate(np.tanh), np.tanh(x) - v),
                         (lambda q: q.integrate(np.tanh) ** 2, 2 * v * (np.tanh(x) - v))):
            e1 = abs(flat_derivative_fd(U, m, x, 1e-3) - exact)
            e2 = abs(flat_derivative_fd(U, m, x, 2e-3) - exact)
            fd_err = max(fd_err, e1)
            if e2 > 1e-9:
                ratios.append(e1 / e2)
    scaling = bool(ratios) and all(0.3 <= r <= 0.7 for r in ratios)
    ok = w1_err <= 1e-10 and kl_err <= 1e-6 and fd_err <= 1e-3 and scaling
    record(11, ok, f"W1 vs LP {w1_err:.1e}; KL {kl_err:.1e}; FD {fd_err:.1e} at eps 1e-3, "
                   f"halving ratios {min(ratios):.3f}..{max(ratios):.3f}")
    assert ok
