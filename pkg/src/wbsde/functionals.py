"""Terminal functionals on measures and the family of BSDE generators.

Cylinder functionals ``psi(m) = Phi(<g_1, m>, ..., <g_k, m>)`` carry exact flat
derivatives and their first two spatial derivatives. Generators are small
immutable objects evaluating ``f(t, x, m, y, z)`` vectorized over ``x`` and
``z``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError
from .measures import DiscreteMeasure, flat_derivative_fd

__all__ = [
    "TerminalFunctional",
    "CylinderSpec",
    "cylinder_eval_and_derivs",
    "cylinder_functional",
    "cylinder_on_clouds",
    "linear_functional",
    "constant_functional",
    "Zero",
    "LinearInZ",
    "SeparableYZ",
    "Quadratic",
    "HamiltonianSup",
    "ClassicalGenerator",
    "ShiftedGenerator",
    "HamiltonianResult",
    "hamiltonian_max",
    "spot_check_concavity",
    "make_functional",
    "make_generator",
    "FUNCTIONAL_REGISTRY",
    "GENERATOR_REGISTRY",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TerminalFunctional:
    """Bounded functional of a measure with optional flat derivatives.

    Attributes
    ----------
    eval : callable
        ``m -> float``.
    flat_deriv, flat_deriv_grad, flat_deriv_grad2 : callable or None
        ``(m, x) -> array`` giving the recentred flat derivative and its first
        and second derivatives in ``x``.
    concave : bool
        Declared concavity along mixtures of measures.
    bound : float
        Sup-norm bound on ``eval``.
    deriv_bound : float
        Sup-norm bound on the flat derivative (``inf`` when unknown).
    """

    eval: Callable[[DiscreteMeasure], float]
    flat_deriv: Callable | None = None
    flat_deriv_grad: Callable | None = None
    flat_deriv_grad2: Callable | None = None
    concave: bool = False
    bound: float = np.inf
    deriv_bound: float = np.inf
    grad_bound: float = np.inf
    name: str = "custom"
    cylinder: "CylinderSpec | None" = None

    def __call__(self, m: DiscreteMeasure) -> float:
        return float(self.eval(m))

    def flat(self, m: DiscreteMeasure, x, eps: float = 1e-3):
        """Flat derivative, falling back to finite differences."""
        if self.flat_deriv is not None:
            return self.flat_deriv(m, x)
        return flat_derivative_fd(self.eval, m, x, eps)

    def shifted(self, c: float) -> "TerminalFunctional":
        """Return ``psi + c`` with the same derivatives."""
        return TerminalFunctional(
            eval=lambda m: self.eval(m) + c, flat_deriv=self.flat_deriv,
            flat_deriv_grad=self.flat_deriv_grad, flat_deriv_grad2=self.flat_deriv_grad2,
            concave=self.concave, bound=self.bound + abs(c), deriv_bound=self.deriv_bound,
            grad_bound=self.grad_bound, name=f"{self.name}{c:+g}",
            cylinder=None if self.cylinder is None else self.cylinder.shifted(c),
        )


@dataclass(frozen=True)
class CylinderSpec:
    """Outer map ``Phi`` and inner test functions of a cylinder functional.

    ``inner`` holds triples ``(g, g', g'')`` of vectorized callables.
    ``outer``, ``outer_grad`` and ``outer_hess`` act on the length-``k``
    vector of inner integrals.
    """

    outer: Callable[[np.ndarray], float]
    outer_grad: Callable[[np.ndarray], np.ndarray]
    outer_hess: Callable[[np.ndarray], np.ndarray]
    inner: Sequence[tuple[ArrayFn, ArrayFn, ArrayFn]]
    inner_bounds: Sequence[tuple[float, float, float]] = ()

    def __post_init__(self):
        if len(self.inner) < 1:
            raise ConfigurationError("a cylinder needs at least one inner function")

    @property
    def k(self) -> int:
        return len(self.inner)

    def integrals(self, m: DiscreteMeasure) -> np.ndarray:
        return np.array([np.dot(m.weights, g(m.points)) for g, _, _ in self.inner])

    def shifted(self, c: float) -> "CylinderSpec":
        outer = self.outer
        return CylinderSpec(lambda v: outer(v) + c, self.outer_grad, self.outer_hess,
                            self.inner, self.inner_bounds)


def cylinder_eval_and_derivs(spec: CylinderSpec, m: DiscreteMeasure, x):
    """Value, flat derivative and two spatial derivatives of a cylinder.

    Returns
    -------
    value : float
        ``Phi(v)`` with ``v_i = <g_i, m>``.
    flat, flat_grad, flat_grad2 : ndarray or float
        ``sum_i d_i Phi(v) (g_i(x) - v_i)`` and the same weights applied to
        ``g_i'(x)`` and ``g_i''(x)``.
    """
    v = spec.integrals(m)
    grad = np.asarray(spec.outer_grad(v), dtype=float).reshape(-1)
    xs = np.asarray(x, dtype=float)
    flat = np.zeros_like(xs)
    d1 = np.zeros_like(xs)
    d2 = np.zeros_like(xs)
    for gi, vi, (g, g1, g2) in zip(grad, v, spec.inner):
        if gi == 0.0:
            continue
        flat = flat + gi * (g(xs) - vi)
        d1 = d1 + gi * g1(xs)
        d2 = d2 + gi * g2(xs)
    value = float(spec.outer(v))
    if xs.ndim == 0:
        return value, float(flat), float(d1), float(d2)
    return value, flat, d1, d2


def _cylinder_parts(spec: CylinderSpec):
    def flat(m, x):
        v = spec.integrals(m)
        grad = np.asarray(spec.outer_grad(v), dtype=float).reshape(-1)
        xs = np.asarray(x, dtype=float)
        out = np.zeros_like(xs)
        for gi, vi, (g, _, _) in zip(grad, v, spec.inner):
            out = out + gi * (g(xs) - vi)
        return out

    def make_deriv(order):
        def deriv(m, x):
            grad = np.asarray(spec.outer_grad(spec.integrals(m)), dtype=float).reshape(-1)
            xs = np.asarray(x, dtype=float)
            out = np.zeros_like(xs)
            for gi, fns in zip(grad, spec.inner):
                out = out + gi * fns[order](xs)
            return out
        return deriv

    return flat, make_deriv(1), make_deriv(2)


def cylinder_functional(spec: CylinderSpec, *, concave: bool = False, bound: float = np.inf,
                        deriv_bound: float = np.inf, grad_bound: float = np.inf,
                        name: str = "cylinder") -> TerminalFunctional:
    """Wrap a cylinder spec as a terminal functional with analytic derivatives."""
    flat, d1, d2 = _cylinder_parts(spec)
    return TerminalFunctional(
        eval=lambda m: float(spec.outer(spec.integrals(m))), flat_deriv=flat,
        flat_deriv_grad=d1, flat_deriv_grad2=d2, concave=concave, bound=bound,
        deriv_bound=deriv_bound, grad_bound=grad_bound, name=name, cylinder=spec,
    )


def linear_functional(g: ArrayFn, g1: ArrayFn, g2: ArrayFn, sup_g: float, sup_g1: float = np.inf,
                      name: str = "linear") -> TerminalFunctional:
    """``psi(m) = <g, m>``."""
    spec = CylinderSpec(lambda v: v[0], lambda v: np.ones_like(v), lambda v: np.zeros((1, 1)),
                        [(g, g1, g2)])
    return cylinder_functional(spec, concave=True, bound=sup_g, deriv_bound=2 * sup_g,
                               grad_bound=sup_g1, name=name)


def constant_functional(c: float) -> TerminalFunctional:
    spec = CylinderSpec(lambda v: c + 0.0 * v[0], lambda v: np.zeros_like(v), lambda v: np.zeros((1, 1)),
                        [(np.tanh, _sech2, _dsech2)])
    return cylinder_functional(spec, concave=True, bound=abs(c), deriv_bound=0.0, grad_bound=0.0,
                               name=f"constant({c:g})")


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


def _dsech2(x):
    return -2.0 * np.tanh(x) / np.cosh(x) ** 2


# ---------------------------------------------------------------- generators


@dataclass(frozen=True)
class Zero:
    """``f = 0``."""

    lip_y: float = 0.0
    lip_z: float = 0.0
    measure_free = True

    def __call__(self, t, x, m, y, z):
        return np.zeros(np.broadcast(np.asarray(x), np.asarray(z)).shape)


@dataclass(frozen=True)
class LinearInZ:
    """``f = ell(t, x, m) * z``; ``ell`` bounded by ``bound``.

    ``measure_dependent`` tells the solvers whether the tangent term along the
    law has to be computed.
    """

    ell: Callable
    bound: float = np.inf
    measure_dependent: bool = True
    lip_y: float = 0.0

    @property
    def lip_z(self) -> float:
        return self.bound

    @property
    def measure_free(self) -> bool:
        return not self.measure_dependent

    def __call__(self, t, x, m, y, z):
        return self.ell(t, np.asarray(x, dtype=float), m) * z


@dataclass(frozen=True)
class SeparableYZ:
    """``f = h(t, m, y) + P(t, x) z`` with declared bounds and y-Lipschitz modulus."""

    h: Callable
    P: Callable
    lip_y: float = 0.0
    h_bound: float = np.inf
    P_bound: float = 0.0
    h_flat: Callable | None = None  # (t, m, y, e) -> flat derivative of h in m

    @property
    def lip_z(self) -> float:
        return self.P_bound

    def __call__(self, t, x, m, y, z):
        return self.h(t, m, y) + self.P(t, np.asarray(x, dtype=float)) * z


@dataclass(frozen=True)
class Quadratic:
    """``f = z**2 / 2``."""

    lip_y: float = 0.0
    lip_z: float = np.inf
    measure_free = True

    def __call__(self, t, x, m, y, z):
        return 0.5 * np.asarray(z, dtype=float) ** 2 + 0.0 * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class ClassicalGenerator:
    """Measure-free generator ``fbar(t, x, z)``, Lipschitz in ``z``."""

    fbar: Callable
    lip_z: float = 0.0
    lip_y: float = 0.0
    measure_free = True

    def __call__(self, t, x, m, y, z):
        return self.fbar(t, np.asarray(x, dtype=float), np.asarray(z, dtype=float))


@dataclass(frozen=True)
class ShiftedGenerator:
    """``f + extra(t, x, m)``; used to build ordered generator pairs."""

    base: Callable
    extra: Callable
    measure_free: bool = False

    @property
    def lip_z(self):
        return getattr(self.base, "lip_z", np.inf)

    @property
    def lip_y(self):
        return getattr(self.base, "lip_y", 0.0)

    def __call__(self, t, x, m, y, z):
        return self.base(t, x, m, y, z) + self.extra(t, np.asarray(x, dtype=float), m)


class HamiltonianResult(NamedTuple):
    value: np.ndarray | float
    action: np.ndarray | float
    tie: bool


@dataclass(frozen=True)
class HamiltonianSup:
    """``f = max_a L(t, x, m, a) + b(t, x, m, a) z`` over a finite action grid."""

    L: Callable
    b: Callable
    actions: np.ndarray = field(default_factory=lambda: np.linspace(-3.0, 3.0, 601))
    b_bound: float = np.inf
    lip_y: float = 0.0
    measure_free: bool = False

    def __post_init__(self):
        a = np.sort(np.asarray(self.actions, dtype=float).ravel())
        if a.size == 0:
            raise ConfigurationError("action grid must be non-empty")
        object.__setattr__(self, "actions", a)

    @property
    def lip_z(self) -> float:
        return self.b_bound

    def __call__(self, t, x, m, y, z):
        return hamiltonian_max(self, t, x, m, z).value


def hamiltonian_max(spec: HamiltonianSup, t: float, x, m: DiscreteMeasure, z,
                    tie_tol: float = 1e-12) -> HamiltonianResult:
    """Exhaustive maximization of ``L + b z`` over the action grid.

    Ties resolve to the smallest action; ``tie`` is raised when any point
    has more than one maximizer.
    """
    xs, zs = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
    a = spec.actions
    shape = xs.shape
    xf = xs.reshape(-1, 1)
    zf = zs.reshape(-1, 1)
    vals = spec.L(t, xf, m, a[None, :]) + spec.b(t, xf, m, a[None, :]) * zf
    vals = np.broadcast_to(vals, (xf.shape[0], a.size))
    idx = np.argmax(vals, axis=1)  # first occurrence -> smallest action
    best = vals[np.arange(vals.shape[0]), idx]
    near = vals >= best[:, None] - tie_tol * np.maximum(1.0, np.abs(best[:, None]))
    tie = bool(np.any(near.sum(axis=1) > 1))
    value = best.reshape(shape)
    action = a[idx].reshape(shape)
    if not shape:
        return HamiltonianResult(float(value), float(action), tie)
    return HamiltonianResult(value, action, tie)


def spot_check_concavity(psi: TerminalFunctional, pairs: Sequence[tuple[DiscreteMeasure, DiscreteMeasure]],
                         tol: float = 1e-10, warn: bool = True) -> bool:
    """Midpoint concavity test ``psi((m1+m2)/2) >= (psi(m1)+psi(m2))/2``."""
    ok = True
    for m1, m2 in pairs:
        mid = psi(m1.mix(m2, 0.5))
        if mid < 0.5 * (psi(m1) + psi(m2)) - tol:
            ok = False
            break
    if not ok and warn:
        warnings.warn(f"functional {psi.name!r} failed the midpoint concavity check", stacklevel=2)
    return ok


# ------------------------------------------------------------------ registry


def _tanh_linear(scale: float = 1.0, shift: float = 0.0) -> TerminalFunctional:
    g = lambda x: scale * np.tanh(x - shift)
    g1 = lambda x: scale * _sech2(x - shift)
    g2 = lambda x: scale * _dsech2(x - shift)
    return linear_functional(g, g1, g2, abs(scale), abs(scale), name="tanh-linear")


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


def _logistic_cylinder(scale: float = 1.0, slope: float = 2.0, shift: float = 0.0) -> TerminalFunctional:
    # concave outer map (log-sigmoid) of a linear statistic: concave in m
    k = slope
    spec = CylinderSpec(
        outer=lambda v: scale * _log_sigmoid(k * v[0]),
        outer_grad=lambda v: np.array([scale * k * _sigmoid(-k * v[0])]),
        outer_hess=lambda v: np.array([[-scale * k * k * np.exp(k * v[0]) / (1.0 + np.exp(k * v[0])) ** 2]]),
        inner=[(lambda x: np.tanh(x - shift), lambda x: _sech2(x - shift), lambda x: _dsech2(x - shift))],
    )
    bound = abs(scale) * np.logaddexp(0.0, k)
    return cylinder_functional(spec, concave=scale >= 0, bound=bound, deriv_bound=2 * abs(scale * k),
                               grad_bound=abs(scale * k), name="logistic-cylinder")


def _square_cylinder(scale: float = 1.0) -> TerminalFunctional:
    spec = CylinderSpec(
        outer=lambda v: scale * v[0] ** 2,
        outer_grad=lambda v: np.array([2 * scale * v[0]]),
        outer_hess=lambda v: np.array([[2 * scale]]),
        inner=[(np.tanh, _sech2, _dsech2)],
    )
    return cylinder_functional(spec, concave=scale <= 0, bound=abs(scale), deriv_bound=4 * abs(scale),
                               grad_bound=2 * abs(scale), name="square-cylinder")


def _product_cylinder(scale: float = 1.0) -> TerminalFunctional:
    spec = CylinderSpec(
        outer=lambda v: scale * v[0] * v[1],
        outer_grad=lambda v: scale * np.array([v[1], v[0]]),
        outer_hess=lambda v: scale * np.array([[0.0, 1.0], [1.0, 0.0]]),
        inner=[(np.tanh, _sech2, _dsech2), (np.sin, np.cos, lambda x: -np.sin(x))],
    )
    return cylinder_functional(spec, concave=False, bound=abs(scale), deriv_bound=4 * abs(scale),
                               grad_bound=2 * abs(scale), name="product-cylinder")


def _constant(value: float = 0.0) -> TerminalFunctional:
    return constant_functional(value)


def _entropic_control(K: float = 3.0, n_actions: int = 601) -> HamiltonianSup:
    return HamiltonianSup(
        L=lambda t, x, m, a: -0.5 * a**2 + 0.0 * x,
        b=lambda t, x, m, a: a + 0.0 * x,
        actions=np.linspace(-K, K, n_actions),
        b_bound=K,
        measure_free=True,
    )


FUNCTIONAL_REGISTRY: dict[str, Callable[..., TerminalFunctional]] = {
    "tanh-linear": _tanh_linear,
    "logistic-cylinder": _logistic_cylinder,
    "square-cylinder": _square_cylinder,
    "product-cylinder": _product_cylinder,
    "constant": _constant,
}

GENERATOR_REGISTRY: dict[str, Callable] = {
    "zero": lambda: Zero(),
    "quadratic": lambda: Quadratic(),
    "entropic-control": _entropic_control,
    "constant-drift": lambda c=0.5: LinearInZ(lambda t, x, m: c + 0.0 * x, bound=abs(c),
                                               measure_dependent=False),
    "linear-decay": lambda lam=1.0: SeparableYZ(lambda t, m, y: -lam * y, lambda t, x: 0.0 * x,
                                                lip_y=abs(lam), h_bound=np.inf),
    "affine": lambda decay=0.0, source=0.0, drift=0.0: SeparableYZ(
        lambda t, m, y: -decay * y + source, lambda t, x: drift + 0.0 * x,
        lip_y=abs(decay), h_bound=np.inf, P_bound=abs(drift)),
}


def _lookup(registry: dict, name: str, kind: str):
    if name not in registry:
        import difflib

        close = difflib.get_close_matches(name, registry, n=3)
        hint = f"; did you mean {', '.join(close)}?" if close else ""
        raise ConfigurationError(f"unknown {kind} {name!r}{hint}")
    return registry[name]


def make_functional(name: str, **params) -> TerminalFunctional:
    """Build a registered terminal functional by name."""
    return _lookup(FUNCTIONAL_REGISTRY, name, "functional")(**params)


def make_generator(name: str, **params):
    """Build a registered generator by name."""
    return _lookup(GENERATOR_REGISTRY, name, "generator")(**params)


def cylinder_on_clouds(spec: CylinderSpec, clouds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate a cylinder on many equally weighted particle clouds.

    Parameters
    ----------
    clouds : ndarray, shape (N, n)
        One cloud of ``n`` particles per row.

    Returns
    -------
    values : ndarray, shape (N,)
    outer_grad : ndarray, shape (N, k)
        Gradient of the outer map at each cloud's inner integrals.
    """
    V = np.stack([g(clouds).mean(axis=1) for g, _, _ in spec.inner])
    values = np.broadcast_to(np.asarray(spec.outer(V), dtype=float), V.shape[1:])
    grad = np.broadcast_to(np.asarray(spec.outer_grad(V), dtype=float), V.shape)
    return np.array(values), np.array(grad).T
