import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sphereplate.constants import EPS0
from sphereplate.electrostatics import (
    ForceModel,
    Geometry,
    Potentials,
    SeriesConvergenceError,
    alpha_theoretical,
    exact_capacitance,
    exact_capacitance_gradient,
    exact_force,
    pfa_force,
)

R = 100e-6

# Dimensionless S = C/(4 pi eps0 R) and dS/dx = (dC/dd)/(4 pi eps0), x = d/R.
# Frozen from an independent mpmath evaluation (40 digits, direct summation
# of csch(n u), derivative by mpmath.diff).
MPMATH_ORACLE = [
    (1e-3, 4.3792371485977623, -498.59648109760343),
    (1e-2, 3.2382346619389331, -48.981060954463751),
    (2e-2, 2.9012032572861281, -24.097235654341442),
    (1.0, 1.3410598130784302, -0.24133959931586918),
    (100.0, 1.0049751249847283, -4.9503749239887763e-5),
]


@pytest.mark.parametrize("x, s_ref, ds_ref", MPMATH_ORACLE)
def test_series_matches_mpmath(x, s_ref, ds_ref):
    g = Geometry(R, x * R)
    assert exact_capacitance(g) / (4 * math.pi * EPS0 * R) == pytest.approx(s_ref, rel=1e-11)
    assert exact_capacitance_gradient(g) / (4 * math.pi * EPS0) == pytest.approx(ds_ref, rel=1e-10)


def test_pfa_force_value():
    # eps0 pi R V^2 / d at R = 100 um, d = 100 nm, V = 0.1 V
    f = pfa_force(Geometry(R, 100e-9), Potentials(0.1))
    assert f == pytest.approx(-2.7816e-10, rel=1e-4)
    assert f == pytest.approx(-EPS0 * math.pi * R * 0.01 / 100e-9, rel=1e-15)


def test_pfa_depends_on_sum_of_potentials():
    g = Geometry(R, 200e-9)
    assert pfa_force(g, Potentials(0.3, -0.1)) == pytest.approx(pfa_force(g, Potentials(0.2)), rel=1e-14)
    assert pfa_force(g, Potentials(0.05, -0.05)) == 0.0


def test_exact_approaches_pfa_at_small_aspect():
    g = Geometry(R, 1e-4 * R)
    pot = Potentials(0.2)
    ratio = exact_force(g, pot) / pfa_force(g, pot)
    assert abs(ratio - 1) < 1e-3
    # the exact force is slightly weaker than the proximity-force estimate
    assert ratio < 1


@pytest.mark.parametrize("x", [1e-3, 1e-2])
def test_exact_weaker_than_pfa(x):
    g = Geometry(R, x * R)
    assert abs(exact_force(g, Potentials(0.1))) < abs(pfa_force(g, Potentials(0.1)))


def test_isolated_sphere_limit():
    # far from the plate C -> 4 pi eps0 R (1 + R/(2d) + ...)
    g = Geometry(R, 1e4 * R)
    c = exact_capacitance(g)
    assert c / (4 * math.pi * EPS0 * R) == pytest.approx(1 + 0.5e-4, rel=1e-8)


def test_capacitance_decreases_with_separation():
    d = np.geomspace(1e-8, 1e-3, 40)
    c = np.array([exact_capacitance(Geometry(R, di)) for di in d])
    assert np.all(np.diff(c) < 0)
    grad = np.array([exact_capacitance_gradient(Geometry(R, di)) for di in d])
    assert np.all(grad < 0)


def test_gradient_matches_finite_difference():
    d = 300e-9
    h = 1e-12
    fd = (exact_capacitance(Geometry(R, d + h)) - exact_capacitance(Geometry(R, d - h))) / (2 * h)
    assert exact_capacitance_gradient(Geometry(R, d)) == pytest.approx(fd, rel=1e-5)


def test_tolerance_halving_changes_little():
    g = Geometry(R, 50e-9)
    a = exact_capacitance_gradient(g, 1e-8)
    b = exact_capacitance_gradient(g, 5e-9)
    assert abs(a / b - 1) < 1e-8


def test_series_gives_up_when_too_many_terms():
    # u ~ sqrt(2 x) = 1.4e-7 needs ~1e8 terms
    with pytest.raises(SeriesConvergenceError):
        exact_capacitance(Geometry(R, 1e-18))


@pytest.mark.parametrize("bad", [0.0, -1e-9, math.inf, math.nan])
def test_geometry_rejects_bad_separation(bad):
    with pytest.raises(ValueError):
        Geometry(R, bad)


def test_force_model_validation():
    with pytest.raises(ValueError):
        ForceModel("dipole")
    with pytest.raises(ValueError):
        ForceModel("exact", 1e-2)


@settings(max_examples=60, deadline=None)
@given(
    v=st.floats(-2.0, 2.0),
    v0=st.floats(-0.1, 0.1),
    x=st.floats(1e-4, 1.0),
)
def test_force_quadratic_in_voltage(v, v0, x):
    g = Geometry(R, x * R)
    for fn in (pfa_force, lambda g_, p_: exact_force(g_, p_, 1e-10)):
        f1 = fn(g, Potentials(v, v0))
        f2 = fn(g, Potentials(2 * v + v0, 0.0))  # effective voltage (2v + v0)
        ref = fn(g, Potentials(1.0, 0.0))
        assert f1 <= 0
        assert f1 == pytest.approx(ref * (v + v0) ** 2, rel=1e-12, abs=1e-30)
        assert f2 == pytest.approx(ref * (2 * v + v0) ** 2, rel=1e-12, abs=1e-30)


def test_alpha_pfa_closed_form():
    g = Geometry(R, 1e-6)
    a = alpha_theoretical(g, 0.9, 1e7)
    assert a == pytest.approx(1e7 * EPS0 * math.pi * R / (0.9 * 1e-6), rel=1e-15)


def test_alpha_exact_below_pfa():
    g = Geometry(R, 1e-6)
    a_pfa = alpha_theoretical(g, 0.9, 1e7, ForceModel("pfa"))
    a_ex = alpha_theoretical(g, 0.9, 1e7, ForceModel("exact"))
    assert 0.97 < a_ex / a_pfa < 1.0
