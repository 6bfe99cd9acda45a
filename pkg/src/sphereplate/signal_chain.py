"""Photodetector signal of the driven sphere-plate capacitor and its lock-in readout.

The analytic path (:func:`harmonic_components`) gives the four terms of the
quasi-static signal directly. The time-domain path (:func:`synthesize_timeseries`
followed by :func:`lockin_demodulate`) exists to cross-check it the way an
instrument would see it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .constants import EPS0
from .electrostatics import Geometry

__all__ = [
    "Excitation",
    "SensorParams",
    "HarmonicComponents",
    "LockinConfig",
    "LockinReading",
    "harmonic_components",
    "synthesize_timeseries",
    "lockin_demodulate",
    "settling_time",
]

MIN_SAMPLES_PER_PERIOD = 20


@dataclass(frozen=True)
class Excitation:
    """``V(t) = v_dc + v_ac sin(omega t)``."""

    v_dc: float
    v_ac: float
    omega: float = 2 * math.pi * 72.2

    def __post_init__(self):
        if self.v_ac < 0:
            raise ValueError("v_ac is an amplitude and must be >= 0")
        if self.omega <= 0:
            raise ValueError("omega must be positive")


@dataclass(frozen=True)
class SensorParams:
    """Cantilever spring constant (N/m), optical gain (V/m), resonance (Hz)."""

    k: float = 0.9
    gamma: float = 1.0e7
    f0: float = 1650.0

    def __post_init__(self):
        if self.k <= 0 or self.gamma <= 0 or self.f0 <= 0:
            raise ValueError("k, gamma and f0 must be positive")

    def check_quasi_static(self, omega: float, margin: float = 10.0) -> None:
        """Raise if the drive is not well below resonance (``f_drive < f0/margin``)."""
        f_drive = omega / (2 * math.pi)
        if f_drive * margin > self.f0:
            raise ValueError(
                f"drive at {f_drive:.1f} Hz is not quasi-static for a {self.f0:.0f} Hz resonance"
            )


@dataclass(frozen=True)
class HarmonicComponents:
    """Magnitudes of the signal terms (volts) plus the static deflection (meters).

    The photodetector signal itself is
    ``S(t) = -static - omega_amplitude*sin(wt) + (peak_to_peak_2w/2)*cos(2wt)``;
    the attractive static term is reported here as a positive magnitude.
    """

    static: float
    omega_amplitude: float
    peak_to_peak_2w: float
    static_deflection: float


@dataclass(frozen=True)
class LockinConfig:
    """Dual-phase lock-in settings.

    ``settle`` is the demodulator output discarded before averaging; ``None``
    derives it from the filter order so the step-response error is below 1e-6.
    """

    harmonic: int = 2
    poles: int = 4
    rc: float = 1.0
    integration: float = 5.0
    settle: float | None = None

    def __post_init__(self):
        if self.harmonic not in (1, 2):
            raise ValueError("harmonic must be 1 or 2")
        if self.poles < 1:
            raise ValueError("poles must be >= 1")
        if self.rc <= 0:
            raise ValueError("rc must be positive")
        if self.integration < self.rc:
            raise ValueError("integration time must be at least one RC")

    @property
    def settle_time(self) -> float:
        return settling_time(self.poles, self.rc) if self.settle is None else self.settle


@dataclass(frozen=True)
class LockinReading:
    amplitude: float
    phase: float

    @property
    def peak_to_peak(self) -> float:
        return 2.0 * self.amplitude


def settling_time(poles: int, rc: float, error: float = 1e-6) -> float:
    """Time for an ``poles``-stage RC cascade step response to come within ``error``.

    The residual of n cascaded identical poles is the Poisson tail
    ``exp(-x) sum_{j<n} x^j/j!`` with ``x = t/rc``; solved by bisection.
    """
    def residual(x):
        return math.exp(-x) * sum(x**j / math.factorial(j) for j in range(poles))

    lo, hi = 0.0, 1.0
    while residual(hi) > error:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if residual(mid) > error:
            lo = mid
        else:
            hi = mid
    return hi * rc


def _prefactor(g: Geometry, s: SensorParams, p: float) -> float:
    return s.gamma * EPS0 * math.pi * g.radius / (s.k * g.separation**p)


def harmonic_components(
    g: Geometry, s: SensorParams, exc: Excitation, v0: float, p: float = 1.0
) -> HarmonicComponents:
    """Static, omega and 2-omega content of the photodetector signal.

    The separation exponent ``p`` is 1 for the elementary law; it is kept free so
    anomalous scalings can be simulated.
    """
    s.check_quasi_static(exc.omega)
    pref = _prefactor(g, s, p)
    offset = v0 + exc.v_dc
    static = pref * (offset**2 + exc.v_ac**2 / 2.0)
    return HarmonicComponents(
        static=static,
        omega_amplitude=pref * 2.0 * offset * exc.v_ac,
        peak_to_peak_2w=pref * exc.v_ac**2,
        static_deflection=static / s.gamma,
    )


def synthesize_timeseries(
    g: Geometry,
    s: SensorParams,
    exc: Excitation,
    v0: float,
    p: float = 1.0,
    sample_rate: float = 20_000.0,
    duration: float = 25.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``S(t)`` on ``[0, duration)``; returns ``(t, S)``."""
    f2 = 2.0 * exc.omega / (2 * math.pi)
    if sample_rate < MIN_SAMPLES_PER_PERIOD * f2:
        raise ValueError(
            f"sample rate {sample_rate:g} Hz undersamples the {f2:g} Hz harmonic "
            f"(need >= {MIN_SAMPLES_PER_PERIOD * f2:g} Hz)"
        )
    if duration <= 0:
        raise ValueError("duration must be positive")
    hc = harmonic_components(g, s, exc, v0, p)
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    wt = exc.omega * t
    sig = -hc.static - hc.omega_amplitude * np.sin(wt) + 0.5 * hc.peak_to_peak_2w * np.cos(2.0 * wt)
    return t, sig


def _lowpass(x: np.ndarray, dt: float, rc: float, poles: int) -> np.ndarray:
    a = -math.expm1(-dt / rc)
    b, den = [a], [1.0, a - 1.0]
    for _ in range(poles):
        x = sps.lfilter(b, den, x)
    return x


def lockin_demodulate(
    t: np.ndarray, sig: np.ndarray, cfg: LockinConfig, omega: float
) -> LockinReading:
    """Dual-phase demodulation at ``cfg.harmonic * omega``.

    Mixes with sine and cosine references, low-passes each product through
    ``cfg.poles`` identical RC stages, drops the first ``cfg.settle_time`` and
    averages the final ``cfg.integration`` seconds. Phase is relative to a
    sine reference.
    """
    t = np.asarray(t, dtype=float)
    sig = np.asarray(sig, dtype=float)
    if t.shape != sig.shape or t.size < 2:
        raise ValueError("t and sig must be equal-length arrays")
    dt = float(t[1] - t[0])
    w_ref = cfg.harmonic * omega
    if w_ref / (2 * math.pi) >= 0.5 / dt:
        raise ValueError("reference frequency is above Nyquist")
    duration = t[-1] - t[0] + dt
    if duration < cfg.integration:
        raise ValueError(f"signal is {duration:g} s long, shorter than the {cfg.integration:g} s integration")
    settle = cfg.settle_time
    if duration < settle + cfg.integration:
        raise ValueError(
            f"signal is {duration:g} s long; need {settle + cfg.integration:g} s for settling plus integration"
        )

    x = _lowpass(2.0 * sig * np.sin(w_ref * t), dt, cfg.rc, cfg.poles)
    y = _lowpass(2.0 * sig * np.cos(w_ref * t), dt, cfg.rc, cfg.poles)
    window = t >= t[-1] + dt - cfg.integration
    xm, ym = float(x[window].mean()), float(y[window].mean())
    return LockinReading(amplitude=math.hypot(xm, ym), phase=math.atan2(ym, xm))
