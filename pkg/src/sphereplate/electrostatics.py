"""Sphere-plate electrostatics: proximity-force law and the exact bispherical series.

Sign convention used throughout the package: forces are signed, attraction is
negative. Capacitance gradients ``dC/dd`` are therefore negative as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import EPS0

__all__ = [
    "Geometry",
    "Potentials",
    "ForceModel",
    "SeriesConvergenceError",
    "pfa_force",
    "exact_capacitance",
    "exact_capacitance_gradient",
    "exact_force",
    "alpha_theoretical",
]

MAX_TERMS = 1_000_000
DEFAULT_SERIES_TOL = 1e-12


class SeriesConvergenceError(RuntimeError):
    """The image-charge series did not converge within ``MAX_TERMS`` terms."""


@dataclass(frozen=True)
class Geometry:
    """Sphere of radius ``radius`` at closest distance ``separation`` from a plate (meters)."""

    radius: float
    separation: float

    def __post_init__(self):
        if not (math.isfinite(self.radius) and math.isfinite(self.separation)):
            raise ValueError("geometry must be finite")
        if self.radius <= 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")
        if self.separation <= 0:
            raise ValueError(f"separation must be positive, got {self.separation}")

    @property
    def aspect(self) -> float:
        """d/R; the proximity-force law is meant for aspect << 1."""
        return self.separation / self.radius


@dataclass(frozen=True)
class Potentials:
    """Applied voltage and contact offset; only their sum enters the force."""

    applied: float
    offset: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.applied) and math.isfinite(self.offset)):
            raise ValueError("potentials must be finite")

    @property
    def effective(self) -> float:
        return self.applied + self.offset


@dataclass(frozen=True)
class ForceModel:
    variant: str = "pfa"
    series_rel_tolerance: float = DEFAULT_SERIES_TOL

    def __post_init__(self):
        if self.variant not in ("pfa", "exact"):
            raise ValueError(f"unknown force model {self.variant!r} (expected 'pfa' or 'exact')")
        if not (0 < self.series_rel_tolerance <= 1e-3):
            raise ValueError("series_rel_tolerance must lie in (0, 1e-3]")


def pfa_force(g: Geometry, pot: Potentials) -> float:
    """Proximity-force sphere-plate force, ``-eps0 pi R (V+V0)^2 / d`` (N)."""
    return -EPS0 * math.pi * g.radius * pot.effective**2 / g.separation


def _bispherical_u(g: Geometry) -> tuple[float, float]:
    # cosh(u) = 1 + x, written to stay accurate for x -> 0
    x = g.aspect
    u = 2.0 * math.asinh(math.sqrt(x / 2.0))
    sinh_u = math.sqrt(x * (2.0 + x))
    return u, sinh_u


def _csch(z: np.ndarray) -> np.ndarray:
    # 1/sinh(z) without overflow for large z
    return 2.0 * np.exp(-z) / -np.expm1(-2.0 * z)


def _coth_minus_inv(z: np.ndarray) -> np.ndarray:
    """coth(z) - 1/z, using the Laurent series where direct evaluation cancels."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.05
    zs = z[small]
    z2 = zs * zs
    out[small] = zs * (1.0 / 3.0 - z2 * (1.0 / 45.0 - z2 * (2.0 / 945.0 - z2 / 4725.0)))
    zl = z[~small]
    out[~small] = 1.0 / np.tanh(zl) - 1.0 / zl
    return out


def _sum_series(term, u: float, tol: float, growth: float) -> float:
    """Sum ``term(n)`` for n >= 1 until the geometric tail bound drops below ``tol``.

    ``growth`` is the polynomial order of the term envelope ``n**growth * exp(-n u)``,
    used to bound the ratio of successive terms beyond the truncation point.
    """
    n_terms = int(math.ceil((math.log(1.0 / tol) + 5.0) / u)) + 2
    while True:
        if n_terms > MAX_TERMS:
            raise SeriesConvergenceError(
                f"series needs more than {MAX_TERMS} terms (u={u:.3e}); separation too small for tol={tol:g}"
            )
        n = np.arange(1, n_terms + 1, dtype=float)
        terms = term(n)
        total = math.fsum(terms)
        last = abs(terms[-1])
        ratio = ((1.0 + 1.0 / n_terms) ** growth) * math.exp(-u)
        if ratio < 1.0:
            tail = last * ratio / (1.0 - ratio)
            if tail <= 0.5 * tol * abs(total):
                return total
        n_terms *= 2


def exact_capacitance(g: Geometry, tol: float = DEFAULT_SERIES_TOL) -> float:
    """Sphere-plane capacitance from the image-charge series (F).

    ``C = 4 pi eps0 R sinh(u) sum_{n>=1} 1/sinh(n u)`` with ``cosh(u) = 1 + d/R``.
    Summation stops once the bounded remainder is below ``tol`` relative to the
    partial sum.
    """
    if not (0 < tol <= 1e-3):
        raise ValueError("tol must lie in (0, 1e-3]")
    u, sinh_u = _bispherical_u(g)
    s = _sum_series(lambda n: _csch(n * u), u, tol, growth=0.0)
    return 4.0 * math.pi * EPS0 * g.radius * sinh_u * s


def exact_capacitance_gradient(g: Geometry, tol: float = DEFAULT_SERIES_TOL) -> float:
    """dC/dd of the series, differentiated term by term (F/m, negative).

    With ``f(z) = coth(z) - 1/z``, each term is ``csch(n u) (f(u) - n f(n u))``,
    which avoids the cancellation between the two ``1/u**2`` pieces of the
    naive derivative.
    """
    if not (0 < tol <= 1e-3):
        raise ValueError("tol must lie in (0, 1e-3]")
    u, _ = _bispherical_u(g)
    fu = float(_coth_minus_inv(np.array([u]))[0])

    def term(n):
        return _csch(n * u) * (fu - n * _coth_minus_inv(n * u))

    return 4.0 * math.pi * EPS0 * _sum_series(term, u, tol, growth=1.0)


def exact_force(g: Geometry, pot: Potentials, tol: float = DEFAULT_SERIES_TOL) -> float:
    """Exact sphere-plate force ``(V+V0)^2/2 * dC/dd`` (N, attraction negative)."""
    return 0.5 * pot.effective**2 * exact_capacitance_gradient(g, tol)


def alpha_theoretical(g: Geometry, k: float, gamma: float, model: ForceModel | None = None) -> float:
    """Peak-to-peak 2-omega signal per squared AC amplitude (V/V^2).

    Under the proximity-force law this is ``gamma eps0 pi R / (k d)``; the exact
    variant uses the curvature of the exact force in the voltage,
    ``gamma |dC/dd| / (2 k)``.
    """
    if k <= 0 or gamma <= 0:
        raise ValueError("spring constant and optical gain must be positive")
    model = model or ForceModel()
    if model.variant == "pfa":
        return gamma * EPS0 * math.pi * g.radius / (k * g.separation)
    return gamma * abs(exact_capacitance_gradient(g, model.series_rel_tolerance)) / (2.0 * k)
