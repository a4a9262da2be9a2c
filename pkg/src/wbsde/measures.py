"""Probability measures on the real line.

Weighted particle clouds, grid densities for entropy quadrature, Gaussian
reference laws, convolution, the 1-D Wasserstein-1 distance and a
finite-difference flat (linear functional) derivative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import DomainCoverageError, InvalidInputError

__all__ = [
    "DiscreteMeasure",
    "GridDensity",
    "GaussianSpec",
    "convolve",
    "wasserstein1",
    "relative_entropy",
    "flat_derivative_fd",
]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite weighted particle cloud on the real line.

    Parameters
    ----------
    points : array_like
        Atom locations.
    weights : array_like, optional
        Non-negative probabilities summing to one. Uniform when omitted.
    """

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float).ravel()
        if pts.size == 0:
            raise InvalidInputError("measure must have at least one atom")
        if weights is None:
            w = np.full(pts.size, 1.0 / pts.size)
        else:
            w = np.asarray(weights, dtype=float).ravel()
        if w.shape != pts.shape:
            raise InvalidInputError("points and weights must have equal length")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise InvalidInputError("points and weights must be finite")
        if np.any(w < 0):
            raise InvalidInputError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"weights sum to {w.sum()!r}, expected 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x: float) -> "DiscreteMeasure":
        return cls([float(x)], [1.0])

    @classmethod
    def empirical(cls, samples) -> "DiscreteMeasure":
        return cls(samples)

    @classmethod
    def normalized(cls, points, weights) -> "DiscreteMeasure":
        """Build a measure after rescaling ``weights`` to unit mass."""
        w = np.asarray(weights, dtype=float)
        return cls(points, w / w.sum())

    def __len__(self) -> int:
        return self.points.size

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        """Return the integral of ``g`` against the measure."""
        return float(np.dot(self.weights, g(self.points)))

    def mean(self) -> float:
        return float(np.dot(self.weights, self.points))

    def variance(self) -> float:
        mu = self.mean()
        return float(np.dot(self.weights, (self.points - mu) ** 2))

    def moment(self, k: int) -> float:
        return float(np.dot(self.weights, self.points**k))

    def shift(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + c, self.weights)

    def mix(self, other: "DiscreteMeasure", eps: float) -> "DiscreteMeasure":
        """Return ``(1 - eps) * self + eps * other``."""
        return DiscreteMeasure.normalized(
            np.concatenate([self.points, other.points]),
            np.concatenate([(1.0 - eps) * self.weights, eps * other.weights]),
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.points.size == 1:
            return np.full(n, self.points[0])
        idx = rng.choice(self.points.size, size=n, p=self.weights)
        return self.points[idx]

    def merged(self) -> "DiscreteMeasure":
        """Sort atoms and merge coincident ones."""
        order = np.argsort(self.points, kind="stable")
        pts = self.points[order]
        w = self.weights[order]
        uniq, start = np.unique(pts, return_index=True)
        return DiscreteMeasure.normalized(uniq, np.add.reduceat(w, start))

    def to_text(self) -> str:
        return "".join(f"{p!r} {w!r}\n" for p, w in zip(self.points, self.weights))

    @classmethod
    def from_text(cls, text: str) -> "DiscreteMeasure":
        arr = np.loadtxt(text.splitlines(), ndmin=2)
        return cls(arr[:, 0], arr[:, 1])

    def to_json(self) -> str:
        return json.dumps({"points": self.points.tolist(), "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DiscreteMeasure":
        d = json.loads(text)
        return cls(d["points"], d["weights"])


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density sampled on a uniform grid, normalized by the Riemann sum."""

    grid: np.ndarray
    values: np.ndarray
    step: float

    def __init__(self, grid, values, step: float | None = None):
        g = np.asarray(grid, dtype=float).ravel()
        v = np.asarray(values, dtype=float).ravel()
        if g.size < 2 or v.shape != g.shape:
            raise InvalidInputError("grid and values must have equal length >= 2")
        h = float(g[1] - g[0]) if step is None else float(step)
        if h <= 0 or not np.allclose(np.diff(g), h, rtol=1e-9, atol=1e-12):
            raise InvalidInputError("grid must be uniformly spaced with the given step")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("density values must be finite and non-negative")
        if abs(h * v.sum() - 1.0) > 1e-8:
            raise InvalidInputError(f"density has mass {h * v.sum()!r}, expected 1")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "step", h)

    @classmethod
    def from_unnormalized(cls, grid, values) -> "GridDensity":
        g = np.asarray(grid, dtype=float)
        v = np.asarray(values, dtype=float)
        h = float(g[1] - g[0])
        return cls(g, v / (h * v.sum()), h)

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], left: float, right: float,
                      n: int) -> "GridDensity":
        g = np.linspace(left, right, n)
        return cls.from_unnormalized(g, f(g))

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.step * np.dot(self.values, g(self.grid)))

    def mean(self) -> float:
        return self.integrate(lambda z: z)

    def to_discrete(self) -> DiscreteMeasure:
        return DiscreteMeasure.normalized(self.grid, self.values * self.step)

    def to_json(self) -> str:
        return json.dumps({"left": float(self.grid[0]), "step": self.step,
                           "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GridDensity":
        d = json.loads(text)
        v = np.asarray(d["values"], dtype=float)
        g = d["left"] + d["step"] * np.arange(v.size)
        return cls(g, v, d["step"])


@dataclass(frozen=True)
class GaussianSpec:
    """Normal law with given mean and variance."""

    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise InvalidInputError("variance must be positive")

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * (x - self.mean) ** 2 / self.variance) / np.sqrt(2 * np.pi * self.variance)

    def tail_outside(self, left: float, right: float) -> float:
        """Probability mass outside ``[left, right]``."""
        return float(ndtr((left - self.mean) / self.sd) + ndtr(-(right - self.mean) / self.sd))

    def quadrature(self, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Hermite nodes and weights for expectations under this law."""
        x, w = _hermgauss(int(n))
        return self.mean + np.sqrt(2.0 * self.variance) * x, w / np.sqrt(np.pi)

    def on_grid(self, left: float, right: float, n: int) -> GridDensity:
        return GridDensity.from_function(self.pdf, left, right, n)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sd * rng.standard_normal(n)


@lru_cache(maxsize=64)
def _hermgauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def convolve(m: DiscreteMeasure, m2: DiscreteMeasure, max_support: int = 200_000) -> DiscreteMeasure:
    """Law of ``X + X'`` for independent ``X ~ m`` and ``X' ~ m2``.

    All pairs are enumerated when ``len(m) * len(m2) <= max_support``.
    Otherwise the product measure is thinned to ``max_support`` atoms by
    systematic (stratified) selection along its cumulative weight, which is
    deterministic and keeps the selection proportional to pair weight.
    """
    if len(m) == 0 or len(m2) == 0:
        raise InvalidInputError("cannot convolve an empty measure")
    if max_support < 1:
        raise InvalidInputError("max_support must be >= 1")
    n1, n2 = len(m), len(m2)
    if n1 * n2 <= max_support:
        pts = (m.points[:, None] + m2.points[None, :]).ravel()
        w = (m.weights[:, None] * m2.weights[None, :]).ravel()
        return DiscreteMeasure.normalized(pts, w)
    # strata midpoints in the flattened product order (row i, column j)
    u = (np.arange(max_support) + 0.5) / max_support
    c1 = np.cumsum(m.weights)
    c1 /= c1[-1]
    i = np.minimum(np.searchsorted(c1, u, side="right"), n1 - 1)
    lower = np.where(i > 0, c1[i - 1], 0.0)
    frac = np.clip((u - lower) / np.maximum(m.weights[i], 1e-300), 0.0, 1.0)
    c2 = np.cumsum(m2.weights)
    c2 /= c2[-1]
    j = np.minimum(np.searchsorted(c2, frac, side="right"), n2 - 1)
    pts = m.points[i] + m2.points[j]
    return DiscreteMeasure(pts).merged()


def _quantile_steps(m: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(m.points, kind="stable")
    cw = np.cumsum(m.weights[order])
    cw[-1] = 1.0
    return m.points[order], cw


def wasserstein1(m: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """Exact W1 distance between two discrete measures on the line.

    Integrates ``|F^{-1} - G^{-1}|`` over the merged partition of [0, 1]
    generated by both cumulative weight sequences.
    """
    x1, c1 = _quantile_steps(m)
    x2, c2 = _quantile_steps(m2)
    levels = np.union1d(c1, c2)
    du = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - 0.5 * du
    q1 = x1[np.minimum(np.searchsorted(c1, mid, side="left"), x1.size - 1)]
    q2 = x2[np.minimum(np.searchsorted(c2, mid, side="left"), x2.size - 1)]
    return float(np.sum(du * np.abs(q1 - q2)))


def relative_entropy(m: GridDensity, gamma: GaussianSpec, tail_tol: float = 1e-10) -> float:
    """Relative entropy of a grid density with respect to a Gaussian law.

    The reference density is sampled on the same grid and renormalized by
    the same Riemann sum, so the result is the exact discrete divergence
    and is never negative.

    Returns
    -------
    float
        ``sum_k step * m_k * log(m_k / gamma_k)``, or ``inf`` when ``m`` has
        mass where the reference density underflows below 1e-300.
    """
    if not isinstance(m, GridDensity):
        raise TypeError("relative entropy requires a GridDensity; atomic measures have infinite entropy")
    h = m.step
    left, right = m.grid[0] - 0.5 * h, m.grid[-1] + 0.5 * h
    if gamma.tail_outside(left, right) > tail_tol:
        raise DomainCoverageError("grid does not cover the reference Gaussian law")
    g = gamma.pdf(m.grid)
    has_mass = m.values > 0
    if np.any(has_mass & (g < 1e-300)):
        return float("inf")
    g = g / (h * g.sum())
    r = m.values[has_mass]
    return float(max(h * np.sum(r * np.log(r / g[has_mass])), 0.0))


def flat_derivative_fd(U: Callable[[DiscreteMeasure], float], m: DiscreteMeasure, x,
                       eps: float = 1e-3) -> np.ndarray | float:
    """Finite-difference flat derivative of ``U`` at ``m`` in direction ``x``.

    Computes ``[U((1 - eps) m + eps delta_x) - U(m)] / eps`` and subtracts its
    ``m``-average over the atoms of ``m`` so that the result integrates to
    zero against ``m``.
    """
    if not 0.0 < eps <= 0.1:
        raise InvalidInputError("eps must lie in (0, 0.1]")
    base = U(m)

    def raw(y):
        return (U(m.mix(DiscreteMeasure.dirac(y), eps)) - base) / eps

    centre = float(np.dot(m.weights, [raw(y) for y in m.points]))
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.array([raw(y) for y in xs]) - centre
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))
