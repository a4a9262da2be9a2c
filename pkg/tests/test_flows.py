import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wbsde.errors import ConfigurationError, DomainError
from wbsde.flows import (DriftFn, constant_drift, gaussian_score, girsanov_weights, kde_score, make_drift,
                         simulate_flow, simulate_mkv_flow, time_grid, zero_drift)
from wbsde.measures import DiscreteMeasure


def test_determinism_and_roundtrip(tmp_path):
    mu0 = DiscreteMeasure([-1.0, 0.5], [0.4, 0.6])
    ts = time_grid(0.0, 0.5, 0.05)
    a = simulate_flow(make_drift("tanh"), mu0, 0.0, ts, 700, seed=11)
    b = simulate_flow(make_drift("tanh"), mu0, 0.0, ts, 700, seed=11)
    assert np.array_equal(a.paths, b.paths)
    c = simulate_flow(make_drift("tanh"), mu0, 0.0, ts, 700, seed=12)
    assert not np.array_equal(a.paths, c.paths)
    a.save(tmp_path / "flow")
    back = type(a).load(tmp_path / "flow", make_drift("tanh"))
    assert np.array_equal(back.paths, a.paths) and back.seed == 11


def test_block_streams_do_not_depend_on_path_count():
    # the first paths are the same whatever the total path count
    ts = time_grid(0.0, 0.2, 0.05)
    small = simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), 0.0, ts, 100, seed=4)
    large = simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), 0.0, ts, 5000, seed=4)
    assert np.array_equal(small.paths, large.paths[:100])


def test_brownian_variance():
    T, t0, n = 1.0, 0.25, 20_000
    fl = simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), t0, time_grid(t0, T, 0.01), n, seed=1)
    var = np.var(fl.paths[:, -1], ddof=1)
    assert abs(var - (T - t0)) <= 3 * (T - t0) * np.sqrt(2 / (n - 1))


def test_constant_drift_mean():
    c, T, n = 0.5, 1.0, 20_000
    mu0 = DiscreteMeasure([-1.0, 0.2, 1.0], [0.3, 0.4, 0.3])
    fl = simulate_flow(constant_drift(c), mu0, 0.0, time_grid(0, T), n, seed=2)
    xT = fl.paths[:, -1]
    assert abs(xT.mean() - (mu0.mean() + c * T)) <= 3 * xT.std(ddof=1) / np.sqrt(n)


def test_flow_constant_before_start():
    fl = simulate_flow(zero_drift(), DiscreteMeasure([0.0, 1.0]), 0.4, time_grid(0.4, 1.0, 0.1), 50, seed=0)
    assert np.array_equal(fl.marginal_at(0.1).points, fl.marginal(0).points)
    with pytest.raises(DomainError):
        fl.index_of(0.433)


def test_bound_and_name_errors():
    bad = DriftFn(lambda t, x: 2 * np.tanh(x), 1.0, "too-big")
    with pytest.raises(ConfigurationError, match="bound"):
        simulate_flow(bad, DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1), 10, seed=0)
    with pytest.raises(ConfigurationError, match="sin-tanh"):
        make_drift("sin_tanh")
    with pytest.raises(ConfigurationError):
        simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1), 1, seed=0)
    with pytest.raises(DomainError):
        simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), 0.0, [0.0, 0.5, 0.4], 10, seed=0)


# ------------------------------------------------------------ McKean-Vlasov


def test_mkv_mean_growth():
    # drift = mean of the law: the mean solves m' = m, so E[X_T] = e^T
    n = 10_000
    fl = simulate_mkv_flow(lambda t, x, m: np.full_like(x, m.mean()), DiscreteMeasure.dirac(1.0),
                           time_grid(0, 0.5), n, seed=3, bound=10.0)
    xT = fl.paths[:, -1]
    assert abs(xT.mean() - np.exp(0.5)) <= 3 * xT.std(ddof=1) / np.sqrt(n)


def test_mkv_reduces_to_plain_flow():
    mu0 = DiscreteMeasure([-0.5, 0.5])
    ts = time_grid(0, 0.5, 0.05)
    a = simulate_mkv_flow(make_drift("tanh"), mu0, ts, 300, seed=8)
    b = simulate_flow(make_drift("tanh"), mu0, 0.0, ts, 300, seed=8)
    assert np.array_equal(a.paths, b.paths)


def test_mkv_picard_gaps_shrink():
    drift = lambda t, x, m: np.tanh(m.mean() - x)
    mu0 = DiscreteMeasure([-1.0, 1.0])
    ts = time_grid(0, 1.0, 0.02)
    f3 = simulate_mkv_flow(drift, mu0, ts, 2000, n_picard=3, seed=5, bound=1.0)
    f6 = simulate_mkv_flow(drift, mu0, ts, 2000, n_picard=6, seed=5, bound=1.0)
    assert np.all(np.diff(f6.picard_gaps) < 0)
    assert f6.picard_gap < f3.picard_gap
    assert f6.picard_gaps[:3] == f3.picard_gaps


# ------------------------------------------------------------ Girsanov


def test_girsanov_identity_target():
    fl = simulate_flow(make_drift("tanh"), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1, 0.05), 200, seed=1)
    assert np.all(girsanov_weights(fl, make_drift("tanh")).weights == 1.0)


def test_girsanov_martingale_and_reweighting():
    n = 20_000
    mu0 = DiscreteMeasure([-1.0, 0.2, 1.0], [0.3, 0.4, 0.3])
    ts = time_grid(0, 1.0, 0.02)
    fl = simulate_flow(zero_drift(), mu0, 0.0, ts, n, seed=21)
    target = make_drift("tanh")
    W = girsanov_weights(fl, target).weights
    assert np.all(W > 0)
    se = W.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(W.mean(axis=0) - 1) <= 3 * se + 1e-15)
    # martingale increments are orthogonal to functions of the current state
    for k in (10, 25, 40):
        dw = W[:, k + 1] - W[:, k]
        A = np.column_stack([np.ones(n), np.tanh(fl.paths[:, k]), W[:, k]])
        coef, *_ = np.linalg.lstsq(A, dw, rcond=None)
        resid = dw - A @ coef
        # heteroscedasticity-robust covariance: increments scale with W_k
        bread = np.linalg.inv(A.T @ A)
        cov = bread @ (A.T * resid**2) @ A @ bread
        assert np.all(np.abs(coef) <= 3 * np.sqrt(np.diag(cov)))
    # reweighted terminal mean vs a direct simulation under the target drift
    direct = simulate_flow(target, mu0, 0.0, ts, n, seed=22).paths[:, -1]
    est = W[:, -1] * fl.paths[:, -1]
    se2 = np.sqrt(est.var(ddof=1) / n + direct.var(ddof=1) / n)
    assert abs(est.mean() - direct.mean()) <= 3 * se2


# ------------------------------------------------------------ scores


def test_gaussian_score_values():
    assert gaussian_score(1.4, 0.3 + 0.2 * 0.4, 1.0, 0.3, 0.2) == pytest.approx(0.0, abs=1e-15)
    assert gaussian_score(1.0, 2.0, 0.0, 0.0) == 2.0
    with pytest.raises(DomainError):
        gaussian_score(0.5, 0.0, 0.5, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1))
def test_gaussian_score_matches_fd(x, y, c):
    h = 0.3
    logp = lambda x0: -0.5 * (y - x0 - c * h) ** 2 / h
    step = 1e-5
    fd = (logp(x + step) - logp(x - step)) / (2 * step)
    assert abs(gaussian_score(h, y, 0.0, x, c) - fd) <= 1e-6


def test_score_identity():
    rng = np.random.default_rng(3)
    h, x, c, n = 0.7, 0.4, 0.3, 100_000
    y = x + c * h + np.sqrt(h) * rng.standard_normal(n)
    s = gaussian_score(h, y, 0.0, x, c)
    assert abs(s.mean()) <= 3 * s.std(ddof=1) / np.sqrt(n)


def test_kde_score_constant_drift():
    fl = simulate_flow(constant_drift(0.3), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1.0, 0.05),
                       100_000, seed=7)
    # at Silverman's bandwidth the estimator sd is about 0.045 here, so this bound is roughly 1 sd
    est = kde_score(fl, 1.0, 0.8, 0.0, 0.0)
    assert abs(est - gaussian_score(1.0, 0.8, 0.0, 0.0, 0.3)) <= 0.05


def test_kde_score_rejects_bandwidth():
    fl = simulate_flow(zero_drift(), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1.0, 0.5), 10, seed=0)
    with pytest.raises(DomainError):
        kde_score(fl, 1.0, 0.8, 0.0, 0.0, bandwidth=0.0)
    with pytest.raises(DomainError):
        kde_score(fl, 0.0, 0.8, 0.0, 0.0)


def test_kde_score_symmetry_and_bandwidth():
    fl = simulate_flow(make_drift("tanh"), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1.0, 0.05),
                       50_000, seed=9)
    est, se = kde_score(fl, 1.0, 0.0, 0.0, 0.0, return_stderr=True)
    assert abs(est) <= 3 * se
    # halving the bandwidth moves the estimate by less than the combined noise once the bias is small
    runs = [kde_score(fl, 1.0, 0.7, 0.0, 0.0, bandwidth=b, return_stderr=True) for b in (0.4, 0.2, 0.1)]
    for (a, sa), (b, sb) in zip(runs[1:], runs[2:]):
        assert abs(a - b) <= 3 * np.hypot(sa, sb)


def test_kde_stderr_matches_seed_spread():
    ests = []
    for seed in range(8):
        fl = simulate_flow(constant_drift(0.3), DiscreteMeasure.dirac(0.0), 0.0, time_grid(0, 1.0, 0.1),
                           20_000, seed=100 + seed)
        ests.append(kde_score(fl, 1.0, 0.8, 0.0, 0.0, return_stderr=True))
    spread = np.std([e for e, _ in ests], ddof=1)
    mean_se = np.mean([s for _, s in ests])
    assert 0.4 <= spread / mean_se <= 2.5
