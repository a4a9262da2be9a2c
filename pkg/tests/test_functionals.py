import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wbsde.errors import ConfigurationError
from wbsde.functionals import (FUNCTIONAL_REGISTRY, CylinderSpec, HamiltonianSup, SeparableYZ,
                               cylinder_eval_and_derivs, cylinder_functional, hamiltonian_max, make_functional,
                               make_generator, spot_check_concavity)
from wbsde.measures import DiscreteMeasure, flat_derivative_fd

sech2 = lambda x: 1 / np.cosh(x) ** 2
TANH = (np.tanh, sech2, lambda x: -2 * np.tanh(x) * sech2(x))


@st.composite
def measures(draw, k_max=5):
    k = draw(st.integers(1, k_max))
    pts = draw(st.lists(st.floats(-3, 3), min_size=k, max_size=k))
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k)))
    return DiscreteMeasure(pts, w / w.sum())


def test_cylinder_hand_values():
    spec = CylinderSpec(lambda v: v[0], lambda v: np.ones(1), lambda v: np.zeros((1, 1)), [TANH])
    val, flat, g1, g2 = cylinder_eval_and_derivs(spec, DiscreteMeasure.dirac(0.0), 1.0)
    assert val == 0.0
    assert flat == pytest.approx(0.7615941559557649, abs=1e-15)
    assert g1 == pytest.approx(1 - np.tanh(1.0) ** 2, abs=1e-15)
    const = CylinderSpec(lambda v: 2.5 + 0 * v[0], lambda v: np.zeros(1), lambda v: np.zeros((1, 1)), [TANH])
    assert tuple(map(float, cylinder_eval_and_derivs(const, DiscreteMeasure([0.0, 1.0]), 0.3))) == (2.5, 0, 0, 0)


# FD error bound C * eps with C = 1/2 sup|Hess Phi| (2 sup|g|)^2 k, from the
# second-order term of Phi along the mixture direction
FD_CONSTANT = {"tanh-linear": 0.0, "constant": 0.0, "logistic-cylinder": 0.5 * 1.0 * 4,
               "square-cylinder": 0.5 * 2 * 4, "product-cylinder": 0.5 * 1 * 4 * 2}


@pytest.mark.parametrize("name", sorted(FUNCTIONAL_REGISTRY))
def test_registry_flat_matches_fd(name, rng):
    psi = make_functional(name)
    tol = max(1e-3, FD_CONSTANT[name] * 1e-3)
    for _ in range(10):
        m = DiscreteMeasure(rng.normal(0, 0.6, 3), rng.dirichlet(np.ones(3)))
        x = float(rng.normal(0, 0.6))
        assert abs(psi.flat(m, x) - flat_derivative_fd(psi, m, x)) <= tol


@pytest.mark.parametrize("name", sorted(FUNCTIONAL_REGISTRY))
def test_registry_fd_error_first_order(name):
    # halving eps halves the FD error when the second-order term is nonzero
    psi = make_functional(name)
    m = DiscreteMeasure([-0.4, 0.3, 1.1], [0.3, 0.3, 0.4])
    x = 1.7
    e1 = abs(psi.flat(m, x) - flat_derivative_fd(psi, m, x, 2e-3))
    e2 = abs(psi.flat(m, x) - flat_derivative_fd(psi, m, x, 1e-3))
    if e1 > 1e-9:
        assert 0.3 <= e2 / e1 <= 0.7
    else:
        assert e2 <= 1e-9


@pytest.mark.parametrize("name", sorted(FUNCTIONAL_REGISTRY))
def test_registry_bounds_and_grad(name, rng):
    psi = make_functional(name)
    for _ in range(20):
        m = DiscreteMeasure(rng.normal(0, 2, 4), rng.dirichlet(np.ones(4)))
        assert abs(psi(m)) <= psi.bound + 1e-12
        x = rng.normal(0, 2, 3)
        step = 1e-4
        fd = (psi.flat(m, x + step) - psi.flat(m, x - step)) / (2 * step)
        assert np.max(np.abs(fd - psi.flat_deriv_grad(m, x))) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(measures(), st.floats(-3, 3))
def test_flat_is_recentred(m, c):
    psi = make_functional("product-cylinder")
    assert abs(np.dot(m.weights, psi.flat(m, m.points))) <= 1e-12
    assert psi.shifted(c)(m) == pytest.approx(psi(m) + c, abs=1e-12)


def test_registry_errors_suggest():
    with pytest.raises(ConfigurationError, match="logistic-cylinder"):
        make_functional("logistc-cylinder")
    with pytest.raises(ConfigurationError, match="quadratic"):
        make_generator("quadratc")


def test_concavity_spot_check(rng):
    pairs = [(DiscreteMeasure(rng.normal(0, 1, 3)), DiscreteMeasure(rng.normal(0, 1, 3))) for _ in range(30)]
    assert spot_check_concavity(make_functional("logistic-cylinder"), pairs)
    with pytest.warns(UserWarning):
        assert not spot_check_concavity(make_functional("square-cylinder"), pairs)


def test_generator_variants():
    aff = make_generator("affine", decay=0.5, source=0.2, drift=0.3)
    assert isinstance(aff, SeparableYZ) and aff.lip_y == 0.5 and aff.lip_z == 0.3
    assert float(aff(0.0, 1.0, None, 2.0, 1.0)) == pytest.approx(-1.0 + 0.2 + 0.3)
    q = make_generator("quadratic")
    assert float(q(0, 0.0, None, 0, 3.0)) == 4.5


# ------------------------------------------------------------------ Hamiltonian


def two_point():
    return HamiltonianSup(lambda t, x, m, a: 0 * a + 0 * x, lambda t, x, m, a: a + 0 * x, np.array([-1.0, 1.0]))


def test_hamiltonian_two_point_and_tie():
    r = hamiltonian_max(two_point(), 0, 0.0, None, 2.0)
    assert (r.value, r.action, r.tie) == (2.0, 1.0, False)
    r = hamiltonian_max(two_point(), 0, 0.0, None, 0.0)
    assert (r.value, r.action, r.tie) == (0.0, -1.0, True)


def entropic(n, K=2.0):
    return HamiltonianSup(lambda t, x, m, a: -0.5 * a**2 + 0 * x, lambda t, x, m, a: a + 0 * x,
                          np.linspace(-K, K, n))


def test_hamiltonian_entropic_grid():
    r = hamiltonian_max(entropic(101), 0, 0.0, None, 0.5)
    assert abs(r.value - 0.125) <= 0.04 and abs(r.action - 0.5) <= 0.04


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.integers(5, 60))
def test_hamiltonian_refinement_and_error(z, k):
    coarse = entropic(k + 1)  # k intervals
    fine = entropic(2 * k + 1)  # contains the coarse grid
    vc = hamiltonian_max(coarse, 0, 0.0, None, z).value
    vf = hamiltonian_max(fine, 0, 0.0, None, z).value
    assert vf >= vc - 1e-15
    step = 4.0 / k
    assert 0.5 * z * z - vc <= step**2 / 2 + 1e-12
